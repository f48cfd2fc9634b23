use std::fs;

use rmd_core::config::RunConfig;
use rmd_core::diffusion::{NetConfig, TeacherConfig};
use rmd_core::error::Error;
use rmd_core::pipeline::{sha256_hex, Run, SampleOptions, CONFIG_FILE, DATASET_FILE, TEACHER_CKPT};

fn tiny(dir: &std::path::Path) -> RunConfig {
    let mut c = RunConfig::preset("toy-default").unwrap();
    c.run_dir = dir.join("run");
    c.data.high_per_class = 8;
    c.data.low_per_class = 8;
    c.net = NetConfig { hidden_channels: 4, ..NetConfig::default() };
    c.teacher = TeacherConfig { low_steps: 5, high_steps: 5, batch_size: 2, val_images: 4, ..TeacherConfig::default() };
    c.rmd.steps = 4;
    c.rmd.warmup_steps = 2;
    c.rmd.batch_size = 1;
    c.eval.samples = 6;
    c.eval.permutations = 10;
    c.eval.reference_steps = 3;
    c
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let tmp = tempfile::tempdir().unwrap();
    let run = Run::create(tiny(tmp.path())).unwrap();
    assert!(matches!(run.train_teacher(), Err(Error::MissingPrerequisite { .. })));
    run.gen_data().unwrap();
    let err = run.distill().unwrap_err();
    match err {
        Error::MissingPrerequisite { path, .. } => assert!(path.ends_with(TEACHER_CKPT)),
        other => panic!("unexpected {other}"),
    }
    assert!(run.eval().is_err());
}

#[test]
fn full_tiny_pipeline_writes_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let run = Run::create(tiny(tmp.path())).unwrap();
    let first = run.gen_data().unwrap();
    let bytes = fs::read(&first).unwrap();
    run.gen_data().unwrap();
    assert_eq!(fs::read(run.path(DATASET_FILE)).unwrap(), bytes, "regeneration is idempotent");
    run.train_teacher().unwrap();
    run.distill().unwrap();
    let dir = run.sample(&SampleOptions { count: 2, ..SampleOptions::default() }).unwrap();
    assert!(dir.join("trace.csv").is_file());
    let report = run.eval().unwrap();
    assert!(report.rows.iter().any(|r| r.method == "student-cascade" && r.value.is_finite()));

    let m = run.manifest().unwrap();
    assert_eq!(m.config_sha256, sha256_hex(&fs::read(run.path(CONFIG_FILE)).unwrap()));
    for cmd in ["gen-data", "train-teacher", "distill", "sample", "eval"] {
        assert!(m.timings.contains_key(cmd), "no timing for {cmd}: {:?}", m.timings.keys());
    }
    let listed = m.files.iter().find(|f| f.path == TEACHER_CKPT).expect("teacher listed");
    assert_eq!(listed.sha256, sha256_hex(&fs::read(run.path(TEACHER_CKPT)).unwrap()));
}

#[test]
fn config_copy_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let run = Run::create(cfg.clone()).unwrap();
    assert_eq!(RunConfig::load(&run.path(CONFIG_FILE)).unwrap(), cfg);
}
