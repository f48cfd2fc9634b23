//! Commands over a self-describing run directory: every command writes its
//! artifacts next to a copy of the config and refreshes `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{infer, naive_cascade_infer, CascadeParams, InferenceTrace};
use crate::config::RunConfig;
use crate::data::{gen_dataset, Dataset, CLASS_COUNT};
use crate::diffusion::{sample_batch, train_teacher, TeacherModel};
use crate::error::{Error, Result};
use crate::evalsuite::{
    contact_sheet_tiles, cost_table_csv, evaluate_sets, summary_stats, write_report, EvalReport, Provenance, SampleSet,
};
use crate::grid::{upsample_to, write_pnm, ImageGrid};
use crate::net::DenoiserNet;
use crate::rmd::{distill, log_csv, DistillState, RmdConfig};
use crate::schedule::inference_schedule;

pub const DATASET_FILE: &str = "data/dataset.bin";
pub const TEACHER_CKPT: &str = "teacher/teacher.ckpt";
pub const TEACHER_LOG: &str = "teacher/log.csv";
/// Weight-averaged generator, the one used for sampling.
pub const GENERATOR_CKPT: &str = "distill/generator.ckpt";
pub const GENERATOR_RAW_CKPT: &str = "distill/generator_raw.ckpt";
pub const FAKE_CKPT: &str = "distill/fake.ckpt";
pub const DISTILL_LOG: &str = "distill/log.csv";
pub const NO_RM_GENERATOR_CKPT: &str = "distill-no-rm/generator.ckpt";
pub const NO_RM_GENERATOR_RAW_CKPT: &str = "distill-no-rm/generator_raw.ckpt";
pub const NO_RM_FAKE_CKPT: &str = "distill-no-rm/fake.ckpt";
pub const NO_RM_LOG: &str = "distill-no-rm/log.csv";
pub const EVAL_DIR: &str = "eval";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Maps `f` over `items` on up to `threads` scoped threads. Output order
/// matches input order regardless of the thread count.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || part.iter().enumerate().map(|(i, t)| f(c * chunk + i, t)).collect::<Vec<R>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub config_sha256: String,
    pub versions: BTreeMap<String, String>,
    pub files: Vec<FileEntry>,
    /// Wall-clock seconds of the latest invocation of each command.
    pub timings: BTreeMap<String, f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn inventory(root: &Path) -> Result<Vec<FileEntry>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            if rel == MANIFEST_FILE {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.push(FileEntry {
                path: rel,
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

/// Options of the `sample` command.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOptions {
    /// Generator checkpoint; the distilled generator of the run by default.
    pub checkpoint: Option<PathBuf>,
    pub class_id: usize,
    pub n: Option<usize>,
    pub alpha_inference: Option<f64>,
    pub seed: u64,
    pub count: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            checkpoint: None,
            class_id: 0,
            n: None,
            alpha_inference: None,
            seed: 0,
            count: 16,
        }
    }
}

#[derive(Debug)]
pub struct DistillOutcome {
    pub rmd: DistillState,
    pub no_rm: Option<DistillState>,
}

/// A run directory bound to its configuration.
#[derive(Debug, Clone)]
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub threads: usize,
}

impl Run {
    /// Creates the directory and writes the config copy.
    pub fn create(config: RunConfig) -> Result<Run> {
        config.validate()?;
        let dir = config.run_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let run = Run { dir, config, threads: 1 };
        run.write(CONFIG_FILE, run.config.to_toml().as_bytes())?;
        run.refresh_manifest(None)?;
        Ok(run)
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn require(&self, what: &'static str, rel: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        if path.is_file() {
            Ok(path)
        } else {
            Err(Error::MissingPrerequisite { what, path })
        }
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let path = self.path(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
    }

    fn refresh_manifest(&self, timing: Option<(&str, f64)>) -> Result<RunManifest> {
        let mut m = self.manifest().unwrap_or_default();
        let cfg = self.require("config copy", CONFIG_FILE)?;
        let bytes = fs::read(&cfg).map_err(|e| Error::io(&cfg, e))?;
        m.config_sha256 = sha256_hex(&bytes);
        m.versions = BTreeMap::from([
            ("crate".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("checkpoint_format".to_string(), "1".to_string()),
            ("dataset_format".to_string(), "1".to_string()),
        ]);
        if let Some((cmd, secs)) = timing {
            m.timings.insert(cmd.to_string(), secs);
        }
        m.files = inventory(&self.dir)?;
        let json = serde_json::to_string_pretty(&m).map_err(|e| Error::Invalid(e.to_string()))?;
        self.write(MANIFEST_FILE, json.as_bytes())?;
        Ok(m)
    }

    fn timed<T>(&self, cmd: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f()?;
        self.refresh_manifest(Some((cmd, t0.elapsed().as_secs_f64())))?;
        Ok(out)
    }

    pub fn gen_data(&self) -> Result<PathBuf> {
        self.timed("gen-data", || {
            let ds = gen_dataset(&self.config.data, self.config.rng("data").seed())?;
            self.write(DATASET_FILE, &ds.to_bytes())
        })
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        Dataset::read(&self.require("dataset (run gen-data first)", DATASET_FILE)?)
    }

    pub fn train_teacher(&self) -> Result<TeacherModel> {
        let ds = self.load_dataset()?;
        self.timed("train-teacher", || {
            let t = train_teacher(&ds, &self.config.net, &self.config.teacher, &self.config.rng("teacher"))?;
            self.write(TEACHER_CKPT, &t.net.to_bytes())?;
            self.write(TEACHER_LOG, t.log_csv().as_bytes())?;
            Ok(t)
        })
    }

    pub fn load_net(&self, what: &'static str, rel: &str) -> Result<DenoiserNet> {
        DenoiserNet::load(&self.require(what, rel)?)
    }

    pub fn load_teacher(&self) -> Result<DenoiserNet> {
        self.load_net("teacher checkpoint (run train-teacher first)", TEACHER_CKPT)
    }

    /// Distils the cascaded generator and, when enabled, the
    /// single-resolution control arm.
    pub fn distill(&self) -> Result<DistillOutcome> {
        let teacher = self.load_teacher()?;
        let partition = self.config.schedule.partition()?;
        self.timed("distill", || {
            let cfg = &self.config.rmd;
            let rmd = distill(&teacher, &partition, cfg, &self.config.rng("rmd"))?;
            self.write(GENERATOR_CKPT, &rmd.generator_ema.to_bytes())?;
            self.write(GENERATOR_RAW_CKPT, &rmd.generator.to_bytes())?;
            self.write(FAKE_CKPT, &rmd.fake.to_bytes())?;
            self.write(DISTILL_LOG, log_csv(&rmd.log).as_bytes())?;
            let no_rm = if self.config.eval.no_rm_arm {
                let cfg = RmdConfig {
                    cross_resolution: false,
                    lambda_r: Vec::new(),
                    stage_weights: Vec::new(),
                    ..cfg.clone()
                };
                let s = distill(&teacher, &partition, &cfg, &self.config.rng("rmd-no-rm"))?;
                self.write(NO_RM_GENERATOR_CKPT, &s.generator_ema.to_bytes())?;
                self.write(NO_RM_GENERATOR_RAW_CKPT, &s.generator.to_bytes())?;
                self.write(NO_RM_FAKE_CKPT, &s.fake.to_bytes())?;
                self.write(NO_RM_LOG, log_csv(&s.log).as_bytes())?;
                Some(s)
            } else {
                None
            };
            Ok(DistillOutcome { rmd, no_rm })
        })
    }

    fn cascade_params(&self, n: usize, alpha: f64, class_id: usize, seed: u64) -> Result<CascadeParams> {
        Ok(CascadeParams {
            partition: self.config.schedule.partition()?,
            n,
            alpha_inference: alpha,
            class_id,
            seed,
        })
    }

    /// Cascaded samples with per-sample seeds and cycling classes, identical
    /// across models for the same `seed`.
    pub fn cascade_samples(&self, g: &DenoiserNet, count: usize, seed: u64, naive: bool) -> Result<Vec<(ImageGrid, InferenceTrace)>> {
        let rmd = &self.config.rmd;
        let params = (0..count)
            .map(|i| self.cascade_params(rmd.n, rmd.alpha_inference, i % CLASS_COUNT, seed.wrapping_add(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        par_map(&params, self.threads, |_, p| if naive { naive_cascade_infer(g, p) } else { infer(g, p) })
            .into_iter()
            .collect()
    }

    pub fn sample(&self, opts: &SampleOptions) -> Result<PathBuf> {
        let g = match &opts.checkpoint {
            Some(p) => DenoiserNet::load(p)?,
            None => self.load_net("generator checkpoint (run distill first)", GENERATOR_CKPT)?,
        };
        if opts.class_id >= CLASS_COUNT {
            return Err(Error::ClassOutOfRange { class_id: opts.class_id, count: CLASS_COUNT });
        }
        if opts.count == 0 {
            return Err(Error::Invalid("sample count must be positive".into()));
        }
        self.timed("sample", || {
            let n = opts.n.unwrap_or(self.config.rmd.n);
            let alpha = opts.alpha_inference.unwrap_or(self.config.rmd.alpha_inference);
            let params = (0..opts.count)
                .map(|i| self.cascade_params(n, alpha, opts.class_id, opts.seed.wrapping_add(i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let runs = par_map(&params, self.threads, |_, p| infer(&g, p)).into_iter().collect::<Result<Vec<_>>>()?;
            let mut trace_csv = String::new();
            let mut stats = String::from("sample,seed,mean,variance,edge_energy\n");
            for (i, (x, trace)) in runs.iter().enumerate() {
                for (j, line) in trace.to_csv().lines().enumerate() {
                    if j == 0 {
                        if i == 0 {
                            trace_csv.push_str(&format!("sample,{line}\n"));
                        }
                        continue;
                    }
                    trace_csv.push_str(&format!("{i},{line}\n"));
                }
                let st = summary_stats(&SampleSet::new(vec![x.clone()], Provenance::StudentCascade)?)?;
                stats.push_str(&format!(
                    "{i},{},{:.9e},{:.9e},{:.9e}\n",
                    params[i].seed, st.mean, st.variance, st.edge_energy
                ));
            }
            let dir = "samples";
            self.write(&format!("{dir}/trace.csv"), trace_csv.as_bytes())?;
            self.write(&format!("{dir}/stats.csv"), stats.as_bytes())?;
            let images: Vec<ImageGrid> = runs.into_iter().map(|(x, _)| x).collect();
            let sheet = contact_sheet_tiles(&images, 8)?;
            let out = self.path(&format!("{dir}/grid.pgm"));
            write_pnm(&out, &sheet, 0.0, 1.0)?;
            Ok(self.path(dir))
        })
    }

    /// Matched-seed sample sets for every method, compared with a many-step
    /// teacher reference at full resolution.
    pub fn eval(&self) -> Result<EvalReport> {
        let teacher = self.load_teacher()?;
        let student = self.load_net("generator checkpoint (run distill first)", GENERATOR_CKPT)?;
        let no_rm = if self.config.eval.no_rm_arm {
            Some(self.load_net("no-RM generator checkpoint (run distill first)", NO_RM_GENERATOR_CKPT)?)
        } else {
            None
        };
        let ds = self.load_dataset()?;
        self.timed("eval", || {
            let e = &self.config.eval;
            let res = self.config.data.high_res;
            let low = self.config.schedule.resolutions[0];
            let classes: Vec<usize> = (0..e.samples).map(|i| i % CLASS_COUNT).collect();
            let rng = self.config.rng("eval");
            let reference = self.teacher_samples(&teacher, &classes, res, rng.derive("reference").seed())?;
            let reference = SampleSet::new(reference, Provenance::TeacherHighres)?;
            let low_samples = self.teacher_samples(&teacher, &classes, low, rng.derive("teacher-low").seed())?;
            let upsampled = SampleSet::new(
                low_samples.iter().map(|x| upsample_to(x, res, res)).collect::<Result<Vec<_>>>()?,
                Provenance::TeacherUpsampled,
            )?;
            let cascade_seed = rng.derive("cascade").seed();
            let traces = |runs: Vec<(ImageGrid, InferenceTrace)>| runs.into_iter().map(|(x, _)| x).collect::<Vec<_>>();
            let mut methods = vec![
                SampleSet::new(traces(self.cascade_samples(&student, e.samples, cascade_seed, false)?), Provenance::StudentCascade)?,
                SampleSet::new(traces(self.cascade_samples(&teacher, e.samples, cascade_seed, true)?), Provenance::NaiveCascade)?,
            ];
            if let Some(g) = &no_rm {
                methods.push(SampleSet::new(traces(self.cascade_samples(g, e.samples, cascade_seed, false)?), Provenance::NoRmCascade)?);
            }
            methods.push(upsampled);
            let dataset_high = SampleSet::new(ds.high_images(), Provenance::DatasetTier("high".into()))?;
            let report = evaluate_sets(&reference, &dataset_high, &methods, e.permutations, &rng.derive("permutation"))?;
            let mut sets: Vec<&SampleSet> = vec![&reference];
            sets.extend(methods.iter());
            write_report(&self.path(EVAL_DIR), &report, &sets, e.contact_tiles)?;
            let example = self.cascade_samples(&student, 1, cascade_seed, false)?;
            self.write(&format!("{EVAL_DIR}/student_trace.csv"), example[0].1.to_csv().as_bytes())?;
            Ok(report)
        })
    }

    fn teacher_samples(&self, teacher: &DenoiserNet, classes: &[usize], res: usize, seed: u64) -> Result<Vec<ImageGrid>> {
        let steps = self.config.eval.reference_steps;
        let chunks: Vec<(usize, &[usize])> = classes.chunks(16).enumerate().collect();
        par_map(&chunks, self.threads, |_, (c, cl)| {
            sample_batch(teacher, cl, res, steps, crate::grid::derive_seed(seed, &format!("chunk-{c}")))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect())
    }
}

/// Inference schedule of a config as CSV.
pub fn schedule_table(config: &RunConfig) -> Result<String> {
    let p = config.schedule.partition()?;
    let steps = inference_schedule(config.rmd.n, &p)?;
    let mut s = String::from("step,stage,resolution,teacher_t,shifted_t,sigma\n");
    for st in &steps {
        s.push_str(&format!(
            "{},{},{},{},{},{:.6}\n",
            st.step,
            st.stage,
            st.resolution,
            st.teacher_t.round() as i64,
            st.shifted_t.round() as i64,
            st.sigma
        ));
    }
    Ok(s)
}

pub fn cost_table() -> Result<String> {
    cost_table_csv()
}
