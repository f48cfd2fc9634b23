//! Rectified-flow teacher: forward process, flow-matching training on the
//! two-tier curriculum, and Euler ODE sampling.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ShapeSample, CLASS_COUNT};
use crate::error::{Error, Result};
use crate::grid::{gaussian_noise, ImageGrid, SeededRng};
use crate::net::{AdamW, DenoiserNet, GradientVector, NetArch};

/// `(1 - σ)·x0 + σ·ε`.
pub fn add_noise(x0: &ImageGrid, eps: &ImageGrid, sigma: f64) -> Result<ImageGrid> {
    x0.check_shape(eps)?;
    Ok(x0.lin_comb(1.0 - sigma, eps, sigma))
}

/// Flow-matching regression at one random σ: returns the mean squared
/// velocity error and its parameter gradient.
pub fn teacher_loss(
    net: &DenoiserNet,
    x0: &ImageGrid,
    class_id: Option<usize>,
    rng: &mut SeededRng,
) -> Result<(f64, GradientVector)> {
    let sigma = rng.uniform();
    let eps = gaussian_noise(x0.shape(), rng);
    velocity_loss_at(net, x0, &eps, sigma, class_id)
}

/// Flow-matching loss for a fixed `(ε, σ)` draw.
pub fn velocity_loss_at(
    net: &DenoiserNet,
    x0: &ImageGrid,
    eps: &ImageGrid,
    sigma: f64,
    class_id: Option<usize>,
) -> Result<(f64, GradientVector)> {
    let xt = add_noise(x0, eps, sigma)?;
    let target = eps.sub(x0);
    let (pred, tape) = net.forward_with_tape(&xt, sigma, class_id)?;
    let resid = pred.sub(&target);
    let d = resid.len() as f64;
    let loss = resid.norm_sq() / d;
    let mut grad = GradientVector::zeros(net.param_count());
    net.backward_from_tape(&tape, &resid.scale(2.0 / d), &mut grad.0)?;
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden_channels: usize,
    pub dilations: Vec<usize>,
    pub time_embed_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden_channels: 16,
            dilations: vec![1, 2, 2],
            time_embed_dim: 8,
        }
    }
}

impl NetConfig {
    pub fn arch(&self) -> NetArch {
        let mut a = NetArch::standard(1, self.hidden_channels, &self.dilations, CLASS_COUNT);
        a.time_embed_dim = self.time_embed_dim;
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    /// Steps on the low tier (heterogeneous, low resolution).
    pub low_steps: usize,
    /// Steps on the high tier (curated, high resolution).
    pub high_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Held-out `(ε, σ)` draws per high-tier image for validation loss.
    pub val_images: usize,
    /// Euler steps for reference sampling.
    pub sample_steps: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            low_steps: 1500,
            high_steps: 1500,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            clip_norm: 1.0,
            val_images: 96,
            sample_steps: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TeacherPhase {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLogEntry {
    pub phase: TeacherPhase,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    pub net: DenoiserNet,
    pub trained_resolutions: Vec<usize>,
    pub log: Vec<TeacherLogEntry>,
    /// High-resolution validation loss at the end of the low-tier phase.
    pub val_high_after_low: f64,
    /// High-resolution validation loss at the end of training.
    pub val_high_final: f64,
}

impl TeacherModel {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("phase,step,loss,grad_norm\n");
        for e in &self.log {
            let phase = match e.phase {
                TeacherPhase::Low => "low",
                TeacherPhase::High => "high",
            };
            s.push_str(&format!("{phase},{},{:.9e},{:.9e}\n", e.step, e.loss, e.grad_norm));
        }
        s
    }
}

/// Mean flow-matching loss over fixed draws, so values are comparable across
/// checkpoints.
pub fn validation_loss(net: &DenoiserNet, samples: &[ShapeSample], seed: u64) -> Result<f64> {
    let root = SeededRng::new(seed);
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let mut rng = root.derive_indexed("val", i as u64);
        let (l, _) = teacher_loss(net, &s.image, Some(s.class_id), &mut rng)?;
        total += l;
    }
    Ok(total / samples.len().max(1) as f64)
}

fn train_phase(
    net: &mut DenoiserNet,
    opt: &mut AdamW,
    samples: &[ShapeSample],
    steps: usize,
    cfg: &TeacherConfig,
    phase: TeacherPhase,
    rng: &mut SeededRng,
    log: &mut Vec<TeacherLogEntry>,
) -> Result<()> {
    if steps > 0 && samples.is_empty() {
        return Err(Error::Invalid(format!("{phase:?} phase has no training samples")));
    }
    for step in 0..steps {
        let mut grad = GradientVector::zeros(net.param_count());
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let s = &samples[rng.below(samples.len())];
            let (l, g) = teacher_loss(net, &s.image, Some(s.class_id), rng)?;
            loss += l;
            grad.add_assign(&g);
        }
        let inv = 1.0 / cfg.batch_size as f64;
        loss *= inv;
        grad.scale(inv);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("teacher {phase:?} phase step {step}"),
                detail: format!("loss {loss}, grad norm {}", grad.norm()),
            });
        }
        let report = opt.step(&mut net.params, &grad, cfg.clip_norm)?;
        log.push(TeacherLogEntry {
            phase,
            step,
            loss,
            grad_norm: report.grad_norm,
        });
    }
    Ok(())
}

/// Curriculum training: low tier first, then the high tier, one parameter set.
pub fn train_teacher(
    dataset: &Dataset,
    net_cfg: &NetConfig,
    cfg: &TeacherConfig,
    rng: &SeededRng,
) -> Result<TeacherModel> {
    if cfg.batch_size == 0 {
        return Err(Error::config("teacher.batch_size", "must be positive"));
    }
    let mut net = DenoiserNet::init(net_cfg.arch(), &mut rng.derive("teacher-init"), 0.1)?;
    let mut opt = AdamW::new(net.param_count(), cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.low_steps + cfg.high_steps);
    let val_set = &dataset.high[..cfg.val_images.min(dataset.high.len())];
    let val_seed = rng.derive("teacher-val").seed();

    let mut train_rng = rng.derive("teacher-low");
    train_phase(&mut net, &mut opt, &dataset.low, cfg.low_steps, cfg, TeacherPhase::Low, &mut train_rng, &mut log)?;
    let val_high_after_low = validation_loss(&net, val_set, val_seed)?;

    let mut train_rng = rng.derive("teacher-high");
    train_phase(&mut net, &mut opt, &dataset.high, cfg.high_steps, cfg, TeacherPhase::High, &mut train_rng, &mut log)?;
    let val_high_final = validation_loss(&net, val_set, val_seed)?;

    let mut trained_resolutions = Vec::new();
    if cfg.low_steps > 0 {
        trained_resolutions.push(dataset.params.low_res);
    }
    if cfg.high_steps > 0 {
        trained_resolutions.push(dataset.params.high_res);
    }
    Ok(TeacherModel {
        net,
        trained_resolutions,
        log,
        val_high_after_low,
        val_high_final,
    })
}

/// `n + 1` values uniform in σ from 1 down to 0.
pub fn uniform_sigmas(n: usize) -> Vec<f64> {
    (0..=n).map(|j| 1.0 - j as f64 / n as f64).collect()
}

/// Euler integration of the velocity field along `sigmas`.
pub fn euler_from(net: &DenoiserNet, x: ImageGrid, class_id: Option<usize>, sigmas: &[f64]) -> Result<ImageGrid> {
    if sigmas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Schedule("sigma schedule must be strictly decreasing".into()));
    }
    let mut x = x;
    for w in sigmas.windows(2) {
        let v = net.forward(&x, w[0], class_id)?;
        x.axpy(-(w[0] - w[1]), &v);
    }
    Ok(x)
}

/// Samples from pure noise at `res × res`. `sigmas` must start at 1; a final
/// 0 is appended when missing.
pub fn euler_sample(
    net: &DenoiserNet,
    class_id: Option<usize>,
    res: usize,
    sigmas: &[f64],
    rng: &mut SeededRng,
) -> Result<ImageGrid> {
    if sigmas.first() != Some(&1.0) {
        return Err(Error::Schedule("sigma schedule must start at 1".into()));
    }
    let mut s = sigmas.to_vec();
    if *s.last().unwrap() != 0.0 {
        s.push(0.0);
    }
    let channels = net.arch().layers[0].in_channels;
    let x = gaussian_noise((channels, res, res), rng);
    euler_from(net, x, class_id, &s)
}

/// Reference samples from the teacher with independent per-sample streams.
pub fn sample_batch(
    net: &DenoiserNet,
    classes: &[usize],
    res: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<ImageGrid>> {
    let root = SeededRng::new(seed);
    let sigmas = uniform_sigmas(steps);
    classes
        .iter()
        .enumerate()
        .map(|(i, &c)| euler_sample(net, Some(c), res, &sigmas, &mut root.derive_indexed("sample", i as u64)))
        .collect()
}
