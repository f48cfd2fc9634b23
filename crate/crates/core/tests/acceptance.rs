//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rmd_core::cascade::{infer, CascadeParams};
use rmd_core::config::RunConfig;
use rmd_core::diffusion::{sample_batch, NetConfig, TeacherConfig};
use rmd_core::evalsuite::{cost_model_speedup, cost_scenarios, mmd_rbf, quantile, MmdTest, Provenance, SampleSet};
use rmd_core::grid::{bilinear_upsample, bilinear_upsample_adjoint, gaussian_noise, upsample_to, ImageGrid, SeededRng};
use rmd_core::net::{gradient_check, rel_error, DenoiserNet, GradCheckConfig, NetArch};
use rmd_core::pipeline::{Run, SampleOptions, DISTILL_LOG, EVAL_DIR, GENERATOR_CKPT, NO_RM_GENERATOR_CKPT, TEACHER_CKPT};
use rmd_core::rmd::{
    clean_estimate, distill, generate_cascade_states, generator_loss, huber_c, mix_noise, pseudo_huber, Phase, RmdConfig,
    TransformChain, StageDraw,
};
use rmd_core::schedule::{apply_flow_shift, build_partition, inference_schedule, map_timestep, LogSnr};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn golden_schedule() -> Outcome {
    let sdxl = build_partition(&[LogSnr(2.0 * (0.498f64 / 0.502).ln())], &[512, 1024], 1.0, 1000.0).map_err(e2s)?;
    let sd35 = build_partition(&[LogSnr(-2.5)], &[512, 1024], 3.0, 1000.0).map_err(e2s)?;
    let wan = build_partition(&[LogSnr(-4.0)], &[480, 720], 5.0, 1000.0).map_err(e2s)?;
    let mut worst: f64 = 0.0;
    for (p, t, want) in [(&sdxl, 750.0, 857.0), (&sd35, 900.0, 947.0), (&wan, 962.0, 974.0), (&wan, 909.0, 937.0)] {
        let (stage, tau) = map_timestep(t, p);
        ensure(stage == 1, format!("t={t} landed in stage {stage}"))?;
        let d = (tau.round() - want).abs();
        worst = worst.max(d);
        ensure(d <= 1.0, format!("t={t}: shifted {tau:.2}, expected {want}"))?;
    }
    let steps = inference_schedule(4, &sd35).map_err(e2s)?;
    let unshifted: Vec<f64> = steps.iter().map(|s| s.teacher_t.round()).collect();
    ensure(unshifted == [1000.0, 900.0, 750.0, 500.0], format!("SD3.5 unshifted {unshifted:?}"))?;
    let shifted: Vec<f64> = steps.iter().map(|s| s.shifted_t.round()).collect();
    ensure(shifted == [1000.0, 947.0, 750.0, 500.0], format!("SD3.5 shifted {shifted:?}"))?;
    let wan_steps = inference_schedule(6, &wan).map_err(e2s)?;
    let published = [1000.0, 962.0, 909.0, 834.0, 716.0, 505.0];
    let mut wan_dev: f64 = 0.0;
    for (s, p) in wan_steps.iter().zip(published) {
        wan_dev = wan_dev.max((s.teacher_t.round() - p).abs());
    }
    ensure(wan_dev <= 6.0, format!("Wan unshifted deviation {wan_dev}"))?;
    let res: Vec<usize> = wan_steps.iter().map(|s| s.resolution).collect();
    ensure(res == [480, 480, 480, 720, 720, 720], format!("Wan resolutions {res:?}"))?;
    let s = apply_flow_shift(0.75, 3.0).0;
    ensure((s - 0.9).abs() < 1e-12, "flow shift (0.75, 3)")?;
    Ok(format!("anchors within {worst} step, Wan unshifted within {wan_dev}"))
}

fn speedups() -> Outcome {
    let sc = cost_scenarios();
    let sp = |i: usize, g: f64| cost_model_speedup(sc[i].base, sc[i].cfg_multiplier, &sc[i].method, g).map_err(e2s);
    let (sdxl, sd35, wan1, wan2) = (sp(0, 1.0)?, sp(1, 1.0)?, sp(2, 1.0)?, sp(2, 2.0)?);
    ensure(sd35 == 32.0, format!("SD3.5 {sd35}"))?;
    ensure(sdxl == 32.0 && sdxl <= 33.4 && 33.4 <= sp(0, 2.0)?, format!("SDXL {sdxl}"))?;
    ensure((wan1 - 23.3).abs() < 0.05 && (wan2 - 28.0).abs() < 0.1, format!("Wan {wan1} / {wan2}"))?;
    ensure(wan1 < 25.6 && 25.6 < wan2, "Wan not bracketed")?;
    Ok(format!("SD3.5 {sd35:.1}, SDXL {sdxl:.1}, Wan {wan1:.2}..{wan2:.2}"))
}

fn numerics() -> Outcome {
    let mut rng = SeededRng::new(31);
    let arch = NetArch::standard(1, 8, &[1, 2], 3);
    ensure(arch.param_count() <= 10_000, "net too large")?;
    let net = DenoiserNet::init(arch, &mut rng, 0.5).map_err(e2s)?;
    let rep = gradient_check(&net, GradCheckConfig::default(), &mut rng).map_err(e2s)?;
    ensure(rep.max_rel_error < 1e-4, format!("denoiser rel err {:.2e}", rep.max_rel_error))?;

    let g = DenoiserNet::init(NetArch::standard(1, 4, &[1, 2], 3), &mut rng, 0.5).map_err(e2s)?;
    let fake = DenoiserNet::init(NetArch::standard(1, 4, &[1, 2], 3), &mut rng, 0.5).map_err(e2s)?;
    let teacher = DenoiserNet::init(NetArch::standard(1, 4, &[1, 2], 3), &mut rng, 0.5).map_err(e2s)?;
    let p = build_partition(&[LogSnr(-2.5)], &[8, 16], 3.0, 1000.0).map_err(e2s)?;
    let mut chain_err: f64 = 0.0;
    for (stage, tau) in [(1usize, 960.0), (2, 620.0)] {
        let draw = StageDraw { stage, shifted_t: tau, teacher_t: p.unshift_timestep(tau, stage) };
        let forward = |net: &DenoiserNet| {
            let states = generate_cascade_states(net, 2, &p, 4, 1.0, 77).unwrap();
            TransformChain::forward(net, states, &draw, 1000.0, 0.2, &mut SeededRng::new(78)).unwrap()
        };
        let chain = forward(&g);
        let (_, gx) = generator_loss(&chain.x_high, chain.sigma_target, &fake, &teacher, 2).map_err(e2s)?;
        let x0f = clean_estimate(&fake, &chain.x_high, chain.sigma_target, 2).map_err(e2s)?;
        let x0t = clean_estimate(&teacher, &chain.x_high, chain.sigma_target, 2).map_err(e2s)?;
        let target = chain.x_high.sub(&x0f.sub(&x0t));
        let c = huber_c(chain.x_high.len());
        let mut grad = vec![0.0; g.param_count()];
        chain.backward(&g, &gx, &mut grad).map_err(e2s)?;
        let h = 1e-5;
        for i in 0..g.param_count() {
            let mut a = g.clone();
            a.params[i] += h;
            let mut b = g.clone();
            b.params[i] -= h;
            let fd = (pseudo_huber(&forward(&a).x_high.sub(&target), c).0 - pseudo_huber(&forward(&b).x_high.sub(&target), c).0) / (2.0 * h);
            chain_err = chain_err.max(rel_error(grad[i], fd, 1e-6));
        }
    }
    ensure(chain_err < 1e-3, format!("chain rel err {chain_err:.2e}"))?;

    let mut adj_err: f64 = 0.0;
    for (h, w, th, tw) in [(4, 4, 8, 8), (5, 3, 11, 7), (8, 8, 12, 12)] {
        let x = gaussian_noise((2, h, w), &mut rng);
        let y = gaussian_noise((2, th, tw), &mut rng);
        let lhs = bilinear_upsample(&x, th, tw).map_err(e2s)?.dot(&y);
        let rhs = x.dot(&bilinear_upsample_adjoint(&y, h, w).map_err(e2s)?);
        adj_err = adj_err.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    ensure(adj_err < 1e-10, format!("adjoint err {adj_err:.2e}"))?;
    Ok(format!(
        "denoiser {:.1e} ({} params), chain {chain_err:.1e} ({} params), adjoint {adj_err:.1e}",
        rep.max_rel_error,
        net.param_count(),
        g.param_count()
    ))
}

fn state_machine() -> Outcome {
    let mut rng = SeededRng::new(41);
    let res_for = |k: usize| match k {
        1 => vec![16],
        2 => vec![8, 16],
        _ => vec![4, 8, 16],
    };
    let mut tried = 0;
    let mut done = 0;
    while done < 100 {
        tried += 1;
        ensure(tried < 10_000, "could not draw valid configurations")?;
        let k = 1 + rng.below(3);
        let n = k + rng.below(9 - k);
        let mut th: Vec<f64> = (0..k - 1).map(|_| rng.uniform_range(-6.0, 4.0)).collect();
        th.sort_by(f64::total_cmp);
        let th: Vec<LogSnr> = th.into_iter().map(LogSnr).collect();
        let shift = rng.uniform_range(1.0, 5.0);
        let p = build_partition(&th, &res_for(k), shift, 1000.0).map_err(e2s)?;
        if inference_schedule(n, &p).is_err() {
            continue; // some stage receives no step
        }
        let net = DenoiserNet::init(NetArch::standard(1, 4, &[1], 3), &mut rng, 0.5).map_err(e2s)?;
        let params = CascadeParams {
            partition: p,
            n,
            alpha_inference: rng.uniform(),
            class_id: rng.below(3),
            seed: rng.below(1 << 30) as u64,
        };
        let (x, trace) = infer(&net, &params).map_err(e2s)?;
        ensure(trace.transitions() == k - 1, format!("K={k} N={n}: {} transitions", trace.transitions()))?;
        ensure(trace.records.len() == n, "record count")?;
        let monotone = trace.records.windows(2).all(|w| w[1].teacher_t < w[0].teacher_t && w[1].resolution >= w[0].resolution);
        ensure(monotone, format!("K={k} N={n}: non-monotone trace"))?;
        ensure(trace.records.last().unwrap().resolution == 16 && x.height() == 16, "final resolution")?;
        let (y, t2) = infer(&net, &params).map_err(e2s)?;
        let same = x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same && t2 == trace, "not bitwise deterministic")?;
        done += 1;
    }
    Ok(format!("100 configurations pass ({} draws skipped for empty stages)", tried - done))
}

fn noise_mix() -> Outcome {
    let mut rng = SeededRng::new(51);
    let p = gaussian_noise((1, 1000, 1000), &mut rng);
    let g = gaussian_noise((1, 1000, 1000), &mut rng);
    ensure(mix_noise(&p, &g, 0.0).map_err(e2s)? == g, "alpha 0")?;
    ensure(mix_noise(&p, &g, 1.0).map_err(e2s)? == p, "alpha 1")?;
    let mut worst: f64 = 0.0;
    for alpha in [0.2, 0.5, 0.9] {
        let m = mix_noise(&p, &g, alpha).map_err(e2s)?;
        let mean = m.mean();
        let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m.len() as f64;
        worst = worst.max((var - 1.0).abs());
    }
    ensure(worst < 0.01, format!("variance off by {worst:.4}"))?;
    Ok(format!("identity cases exact, |var - 1| <= {worst:.4} over 1e6 draws"))
}

fn pseudo_huber_regimes() -> Outcome {
    let mut worst_q: f64 = 0.0;
    let mut worst_l: f64 = 0.0;
    for d in [64usize, 256, 1024] {
        let c = huber_c(d);
        let dir = gaussian_noise((1, d, 1), &mut SeededRng::new(d as u64));
        let unit = dir.scale(1.0 / dir.norm_sq().sqrt());
        for frac in [1e-3, 1e-2, 0.05, 0.1] {
            let r = frac * c;
            let (v, _) = pseudo_huber(&unit.scale(r), c);
            let q = r * r / (2.0 * c);
            worst_q = worst_q.max((v - q).abs() / q);
        }
        for mult in [100.0, 300.0, 1000.0] {
            let r = mult * c;
            let h = 1e-3 * c;
            let slope = (pseudo_huber(&unit.scale(r + h), c).0 - pseudo_huber(&unit.scale(r - h), c).0) / (2.0 * h);
            worst_l = worst_l.max((slope - 1.0).abs());
        }
    }
    ensure(worst_q < 0.01, format!("quadratic regime off by {worst_q:.4}"))?;
    ensure(worst_l < 0.01, format!("linear slope off by {worst_l:.4}"))?;
    Ok(format!("quadratic within {worst_q:.1e}, slope within {worst_l:.1e}"))
}

fn warmup_audit() -> Outcome {
    let teacher = DenoiserNet::init(NetArch::standard(1, 4, &[1, 2], 3), &mut SeededRng::new(61), 0.3).map_err(e2s)?;
    let p = build_partition(&[LogSnr(-2.5)], &[8, 16], 3.0, 1000.0).map_err(e2s)?;
    let cfg = RmdConfig { steps: 240, warmup_steps: 40, batch_size: 1, ..RmdConfig::default() };
    let s = distill(&teacher, &p, &cfg, &SeededRng::new(62)).map_err(e2s)?;
    let early_bad = s.log.iter().filter(|e| e.step < 40 && (e.stage != 1 || e.phase != Phase::Warmup)).count();
    ensure(early_bad == 0, format!("{early_bad} warm-up draws outside stage 1"))?;
    let after: Vec<usize> = s.log.iter().filter(|e| e.step >= 40).map(|e| e.stage).collect();
    let twos = after.iter().filter(|&&st| st == 2).count() as f64;
    ensure(twos > 0.0, "no stage-2 draws after warm-up")?;
    let n = after.len() as f64;
    let e = n / 2.0;
    let chi2 = (twos - e).powi(2) / e + ((n - twos) - e).powi(2) / e;
    ensure(chi2 < 10.83, format!("stage frequencies chi2 {chi2:.2}"))?;
    Ok(format!("0 stage-2 draws in 40 warm-up steps, {:.0}% stage 2 after (chi2 {chi2:.2})", 100.0 * twos / n))
}

/// Full toy pipeline shared by the teacher-gap and ablation criteria.
struct ToyRun {
    run: Run,
    elapsed: f64,
}

fn toy_run(root: &Path) -> Result<ToyRun, String> {
    let t0 = Instant::now();
    let mut cfg = RunConfig::preset("toy-default").map_err(e2s)?;
    cfg.run_dir = root.join("toy");
    let run = Run::create(cfg).map_err(e2s)?;
    run.gen_data().map_err(e2s)?;
    run.train_teacher().map_err(e2s)?;
    run.distill().map_err(e2s)?;
    run.eval().map_err(e2s)?;
    Ok(ToyRun { run, elapsed: t0.elapsed().as_secs_f64() })
}

fn teacher_gap(toy: &ToyRun) -> Outcome {
    let teacher = toy.run.load_teacher().map_err(e2s)?;
    let n = 256;
    let classes: Vec<usize> = (0..2 * n).map(|i| i % 3).collect();
    let hi = sample_batch(&teacher, &classes, 16, 32, 9001).map_err(e2s)?;
    let lo = sample_batch(&teacher, &classes[..n], 8, 32, 9002).map_err(e2s)?;
    let up: Vec<ImageGrid> = lo.iter().map(|x| upsample_to(x, 16, 16).unwrap()).collect();
    let set = |v: Vec<ImageGrid>| SampleSet::new(v, Provenance::TeacherHighres).unwrap();
    let (a, b) = (set(hi[..n].to_vec()), set(hi[n..].to_vec()));
    let gap = mmd_rbf(&set(up), &a, None).map_err(e2s)?;
    let halves = MmdTest::new(&a, &b, None).map_err(e2s)?;
    let q95 = quantile(&halves.permutation_null(200, &mut SeededRng::new(9003)), 0.95);
    let null = halves.statistic().abs().max(q95);
    ensure(gap >= 3.0 * null, format!("gap {gap:.5} < 3 x null {null:.5}"))?;
    Ok(format!("MMD(up 8->16, 16) = {gap:.4}, null = {null:.5} (halves {:.5}, q95 {q95:.5}), ratio {:.0}x", halves.statistic(), gap / null))
}

fn ablation(toy: &ToyRun) -> Outcome {
    let csv = fs::read_to_string(toy.run.path(EVAL_DIR).join("report.csv")).map_err(e2s)?;
    let get = |method: &str, metric: &str| -> Result<f64, String> {
        csv.lines()
            .find_map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f.len() == 3 && f[0] == method && f[1] == metric).then(|| f[2].parse::<f64>().ok()).flatten()
            })
            .ok_or(format!("report lacks {method}/{metric}"))
    };
    let student = get("student-cascade", "mmd_to_teacher")?;
    let naive = get("naive-cascade", "mmd_to_teacher")?;
    let no_rm = get("no-rm-cascade", "mmd_to_teacher")?;
    let width = ["student-cascade", "naive-cascade", "no-rm-cascade"]
        .iter()
        .map(|m| get(m, "mmd_null_q95"))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .fold(0.0f64, f64::max);
    let msg = format!("student {student:.4}, naive {naive:.4}, no-RM {no_rm:.4}, null width {width:.4}");
    ensure(naive - student >= 2.0 * width, format!("vs naive: {msg}"))?;
    ensure(no_rm - student >= 2.0 * width, format!("vs no-RM: {msg}"))?;
    ensure(toy.elapsed <= 1800.0, format!("pipeline took {:.0}s", toy.elapsed))?;
    Ok(format!("{msg}; pipeline {:.0}s", toy.elapsed))
}

fn tiny_config(dir: &Path) -> RunConfig {
    let mut c = RunConfig::preset("toy-default").unwrap();
    c.run_dir = dir.to_path_buf();
    c.seed = 5;
    c.data.high_per_class = 16;
    c.data.low_per_class = 16;
    c.net = NetConfig { hidden_channels: 6, ..NetConfig::default() };
    c.teacher = TeacherConfig { low_steps: 30, high_steps: 30, batch_size: 2, val_images: 8, ..TeacherConfig::default() };
    c.rmd.steps = 12;
    c.rmd.warmup_steps = 4;
    c.rmd.batch_size = 2;
    c.eval.samples = 12;
    c.eval.permutations = 20;
    c.eval.reference_steps = 4;
    c
}

fn reproducibility(root: &Path) -> Outcome {
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let run = Run::create(tiny_config(&root.join(name))).map_err(e2s)?;
        run.gen_data().map_err(e2s)?;
        run.train_teacher().map_err(e2s)?;
        run.distill().map_err(e2s)?;
        run.sample(&SampleOptions { class_id: 1, count: 3, seed: 4, ..SampleOptions::default() }).map_err(e2s)?;
        run.eval().map_err(e2s)?;
        runs.push(run);
    }
    let files = [
        "data/dataset.bin",
        TEACHER_CKPT,
        "teacher/log.csv",
        GENERATOR_CKPT,
        "distill/fake.ckpt",
        DISTILL_LOG,
        NO_RM_GENERATOR_CKPT,
        "samples/trace.csv",
        "samples/stats.csv",
        "eval/student_trace.csv",
        "eval/report.csv",
    ];
    for f in files {
        let a = fs::read(runs[0].path(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = fs::read(runs[1].path(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(a == b, format!("{f} differs"))?;
    }
    Ok(format!("{} artifacts byte-identical across two runs", files.len()))
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut check = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        let tag = if out.is_ok() { "PASS" } else { "FAIL" };
        let detail = match &out {
            Ok(m) | Err(m) => m.clone(),
        };
        println!("[{tag}] criterion {id:>2} {name}: {detail} ({secs:.1}s)");
        results.push((id, name, out, secs));
    };
    check(1, "schedule golden values", &mut golden_schedule);
    check(2, "speedup accounting", &mut speedups);
    check(3, "numerical correctness", &mut numerics);
    check(4, "cascade state machine", &mut state_machine);
    check(5, "noise mix", &mut noise_mix);
    let toy = toy_run(root.path());
    match &toy {
        Ok(t) => {
            check(6, "teacher cross-resolution gap", &mut || teacher_gap(t));
            check(7, "cascade ablation", &mut || ablation(t));
        }
        Err(e) => {
            let e = e.clone();
            check(6, "teacher cross-resolution gap", &mut || Err(format!("pipeline failed: {e}")));
            check(7, "cascade ablation", &mut || Err(format!("pipeline failed: {e}")));
        }
    }
    check(8, "warm-up gating", &mut warmup_audit);
    check(9, "pseudo-Huber regimes", &mut pseudo_huber_regimes);
    check(10, "reproducibility", &mut || reproducibility(root.path()));
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
