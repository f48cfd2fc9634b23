//! Cross-resolution distribution matching distillation: the upsampling
//! transformation with noise re-injection, the generator and fake-score
//! objectives, warm-up gating and the training loop.

use serde::{Deserialize, Serialize};

use crate::cascade::{reinject, reinject_adjoint, CascadeParams, Rollout};
use crate::data::CLASS_COUNT;
use crate::error::{Error, Result};
use crate::grid::{gaussian_noise, upsample_to, ImageGrid, SeededRng};
use crate::net::{AdamW, DenoiserNet, GradientVector, Tape};
use crate::schedule::{build_partition, TrajectoryPartition};

/// Pseudo-Huber scale per unit `√d`.
pub const HUBER_SCALE: f64 = 0.00054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmdConfig {
    /// Generator sampling steps per rollout.
    pub n: usize,
    /// Predicted-noise weight in the training transformation.
    pub alpha: f64,
    /// Predicted-noise weight at cascade transitions during rollouts and sampling.
    pub alpha_inference: f64,
    /// Per-stage generator weights; empty means 1 for every stage.
    pub lambda_r: Vec<f64>,
    /// Per-stage sampling weights; empty means uniform.
    pub stage_weights: Vec<f64>,
    pub snr_clamp: (f64, f64),
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_fake: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    /// Decay of the generator weight average used for sampling; 0 keeps the
    /// raw weights.
    pub ema_decay: f64,
    /// Distil along the cascade; when off, states come from a single
    /// full-resolution trajectory.
    pub cross_resolution: bool,
}

impl Default for RmdConfig {
    fn default() -> Self {
        Self {
            n: 4,
            alpha: 0.2,
            alpha_inference: 1.0,
            lambda_r: Vec::new(),
            stage_weights: Vec::new(),
            snr_clamp: (1e-4, 1e4),
            warmup_steps: 50,
            steps: 500,
            batch_size: 4,
            lr_generator: 1e-4,
            lr_fake: 1e-3,
            beta2: 0.999,
            clip_norm: 1.0,
            ema_decay: 0.995,
            cross_resolution: true,
        }
    }
}

impl RmdConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        let unit = |key: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(key, format!("{v} is outside [0, 1]")))
            }
        };
        unit("rmd.alpha", self.alpha)?;
        unit("rmd.alpha_inference", self.alpha_inference)?;
        for (key, list) in [("rmd.lambda_r", &self.lambda_r), ("rmd.stage_weights", &self.stage_weights)] {
            if !list.is_empty() && list.len() != k {
                return Err(Error::config(key, format!("{} entries for {k} stages", list.len())));
            }
            if list.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                return Err(Error::config(key, "weights must be positive"));
            }
        }
        let (lo, hi) = self.snr_clamp;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("rmd.snr_clamp", format!("invalid range ({lo}, {hi})")));
        }
        if self.n < k {
            return Err(Error::config("rmd.n", format!("{} steps cannot cover {k} stages", self.n)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("rmd.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("rmd.ema_decay", format!("{} is outside [0, 1)", self.ema_decay)));
        }
        Ok(())
    }

    pub fn lambda(&self, stage: usize) -> f64 {
        self.lambda_r.get(stage - 1).copied().unwrap_or(1.0)
    }

    /// `√(1 - α²)`.
    pub fn beta(&self) -> f64 {
        (1.0 - self.alpha * self.alpha).sqrt()
    }
}

/// Partition used for distillation states: the cascade itself, or a single
/// stage at the final resolution when cross-resolution states are disabled.
pub fn training_partition(p: &TrajectoryPartition, cross_resolution: bool) -> Result<TrajectoryPartition> {
    if cross_resolution {
        Ok(p.clone())
    } else {
        build_partition(&[], &[p.final_resolution()], p.flow_shift, p.t_max)
    }
}

/// `α·predicted + √(1-α²)·gaussian`.
pub fn mix_noise(predicted: &ImageGrid, gaussian: &ImageGrid, alpha: f64) -> Result<ImageGrid> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain {
            value: alpha,
            domain: "alpha in [0, 1]",
        });
    }
    predicted.check_shape(gaussian)?;
    Ok(predicted.lin_comb(alpha, gaussian, (1.0 - alpha * alpha).sqrt()))
}

/// Maps a noisy state at `sigma_state` to the final resolution at noise level
/// `sigma_target` through the generator's clean and noise estimates.
pub fn upsample_transform(
    g: &DenoiserNet,
    x: &ImageGrid,
    sigma_state: f64,
    class_id: usize,
    sigma_target: f64,
    final_res: usize,
    alpha: f64,
    rng: &mut SeededRng,
) -> Result<ImageGrid> {
    let v = g.forward(x, sigma_state, Some(class_id))?;
    let fresh = gaussian_noise((x.channels(), final_res, final_res), rng);
    reinject(x, &v, sigma_state, sigma_target, final_res, alpha, &fresh)
}

/// `√(‖r‖² + C²) - C` and its gradient `r / √(‖r‖² + C²)`.
pub fn pseudo_huber(r: &ImageGrid, c: f64) -> (f64, ImageGrid) {
    let root = (r.norm_sq() + c * c).sqrt();
    (root - c, r.scale(1.0 / root))
}

pub fn huber_c(d: usize) -> f64 {
    HUBER_SCALE * (d as f64).sqrt()
}

/// Clean estimate `x - σ·v` of a velocity network.
pub fn clean_estimate(net: &DenoiserNet, x: &ImageGrid, sigma: f64, class_id: usize) -> Result<ImageGrid> {
    let v = net.forward(x, sigma, Some(class_id))?;
    Ok(x.lin_comb(1.0, &v, -sigma))
}

/// Distribution-matching loss on a full-resolution state. The regression
/// target is frozen, so the returned gradient is for `x_high` only.
pub fn generator_loss(
    x_high: &ImageGrid,
    sigma_t: f64,
    fake: &DenoiserNet,
    teacher: &DenoiserNet,
    class_id: usize,
) -> Result<(f64, ImageGrid)> {
    let x0_fake = clean_estimate(fake, x_high, sigma_t, class_id)?;
    let x0_teacher = clean_estimate(teacher, x_high, sigma_t, class_id)?;
    // target = sg(x - (x0_fake - x0_teacher)) so the residual is the difference
    let r = x0_fake.sub(&x0_teacher);
    Ok(pseudo_huber(&r, huber_c(x_high.len())))
}

pub fn snr_weight(sigma: f64, clamp: (f64, f64)) -> f64 {
    let snr = ((1.0 - sigma) / sigma).powi(2);
    if snr.is_nan() {
        clamp.1
    } else {
        snr.clamp(clamp.0, clamp.1)
    }
}

/// SNR-weighted clean-image regression of the fake score onto the
/// (detached) upsampled generator estimate.
pub fn fake_score_loss(
    fake: &DenoiserNet,
    x_high: &ImageGrid,
    sigma_t: f64,
    class_id: usize,
    clean_target: &ImageGrid,
    snr_clamp: (f64, f64),
) -> Result<(f64, GradientVector)> {
    let (v, tape) = fake.forward_with_tape(x_high, sigma_t, Some(class_id))?;
    let diff = x_high.lin_comb(1.0, &v, -sigma_t).sub(clean_target);
    let d = diff.len() as f64;
    let w = snr_weight(sigma_t, snr_clamp);
    let mut grad = GradientVector::zeros(fake.param_count());
    fake.backward_from_tape(&tape, &diff.scale(-2.0 * w * sigma_t / d), &mut grad.0)?;
    Ok((w * diff.norm_sq() / d, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Warmup,
    Full,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Full => "full",
        }
    }
}

/// A sampled stage with its timestep in both spaces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageDraw {
    pub stage: usize,
    pub shifted_t: f64,
    pub teacher_t: f64,
}

/// Number of stages eligible during warm-up: `⌊K/2⌋`, at least one.
pub fn warmup_stages(k: usize) -> usize {
    (k / 2).max(1)
}

pub fn sample_stage_and_timestep(
    p: &TrajectoryPartition,
    phase: Phase,
    weights: &[f64],
    rng: &mut SeededRng,
) -> StageDraw {
    let eligible = match phase {
        Phase::Warmup => warmup_stages(p.k()),
        Phase::Full => p.k(),
    };
    let w = |i: usize| weights.get(i).copied().unwrap_or(1.0);
    let total: f64 = (0..eligible).map(w).sum();
    let mut u = rng.uniform() * total;
    let mut stage = eligible;
    for i in 0..eligible {
        if u < w(i) {
            stage = i + 1;
            break;
        }
        u -= w(i);
    }
    let (lo, hi) = p.stage(stage).shifted_interval;
    let shifted_t = rng.uniform_range(lo, hi);
    StageDraw {
        stage,
        shifted_t,
        teacher_t: p.unshift_timestep(shifted_t, stage),
    }
}

/// Recorded noisy states of a generator rollout, in sampling order.
pub type CascadeStates = Rollout;

pub fn generate_cascade_states(
    g: &DenoiserNet,
    class_id: usize,
    partition: &TrajectoryPartition,
    n: usize,
    alpha_inference: f64,
    seed: u64,
) -> Result<CascadeStates> {
    Rollout::run(
        g,
        &CascadeParams {
            partition: partition.clone(),
            n,
            alpha_inference,
            class_id,
            seed,
        },
    )
}

/// Forward pass of the chain rollout → state at the sampled timestep →
/// upsampling transformation, with everything kept for backpropagation.
#[derive(Debug, Clone)]
pub struct TransformChain {
    pub states: CascadeStates,
    /// Rollout step whose input anchors the sampled state.
    pub anchor: usize,
    pub sigma_state: f64,
    pub sigma_target: f64,
    pub alpha: f64,
    pub x_state: ImageGrid,
    /// Upsampled clean estimate of the generator (detached target for the fake score).
    pub clean_target: ImageGrid,
    pub x_high: ImageGrid,
    tape: Tape,
}

impl TransformChain {
    pub fn forward(
        g: &DenoiserNet,
        states: CascadeStates,
        draw: &StageDraw,
        t_max: f64,
        alpha: f64,
        rng: &mut SeededRng,
    ) -> Result<TransformChain> {
        let in_stage: Vec<usize> = (0..states.steps.len())
            .filter(|&j| states.steps[j].stage == draw.stage)
            .collect();
        let first = *in_stage
            .first()
            .ok_or_else(|| Error::Invalid(format!("rollout has no state in stage {}", draw.stage)))?;
        let anchor = in_stage
            .iter()
            .copied()
            .filter(|&j| states.steps[j].shifted_t >= draw.shifted_t)
            .last()
            .unwrap_or(first);
        let st = &states.steps[anchor];
        let sigma_state = draw.shifted_t / t_max;
        let x_state = st.input.lin_comb(1.0, &st.velocity, sigma_state - st.sigma);
        let (v, tape) = g.forward_with_tape(&x_state, sigma_state, Some(states.class_id))?;
        let res = states.trace.final_resolution;
        let sigma_target = draw.teacher_t / t_max;
        let fresh = gaussian_noise((x_state.channels(), res, res), rng);
        let x_high = reinject(&x_state, &v, sigma_state, sigma_target, res, alpha, &fresh)?;
        let clean_target = upsample_to(&x_state.lin_comb(1.0, &v, -sigma_state), res, res)?;
        Ok(TransformChain {
            anchor,
            sigma_state,
            sigma_target,
            alpha,
            x_state,
            clean_target,
            x_high,
            tape,
            states,
        })
    }

    /// Accumulates `∂(upstream·x_high)/∂θ` into `grad`.
    pub fn backward(&self, g: &DenoiserNet, upstream: &ImageGrid, grad: &mut [f64]) -> Result<()> {
        let src = (self.x_state.height(), self.x_state.width());
        let (g_direct, g_v) = reinject_adjoint(upstream, src, self.sigma_state, self.sigma_target, self.alpha)?;
        let g_state = g_direct.add(&g.backward_from_tape(&self.tape, &g_v, grad)?);
        let st = &self.states.steps[self.anchor];
        let c = self.sigma_state - st.sigma;
        let g_anchor = g_state.add(&g.backward_from_tape(st.tape(), &g_state.scale(c), grad)?);
        self.states.backward_to_params(g, self.anchor, &g_anchor, grad)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillLogEntry {
    pub step: usize,
    pub phase: Phase,
    pub stage: usize,
    pub teacher_t: f64,
    pub shifted_t: f64,
    pub generator_loss: f64,
    pub fake_loss: f64,
    pub generator_grad_norm: f64,
    pub fake_grad_norm: f64,
}

pub fn log_csv(log: &[DistillLogEntry]) -> String {
    let mut s = String::from("step,phase,stage,teacher_t,shifted_t,generator_loss,fake_loss,generator_grad_norm,fake_grad_norm\n");
    for e in log {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.9e},{:.9e},{:.9e},{:.9e}\n",
            e.step,
            e.phase.as_str(),
            e.stage,
            e.teacher_t,
            e.shifted_t,
            e.generator_loss,
            e.fake_loss,
            e.generator_grad_norm,
            e.fake_grad_norm
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct DistillState {
    pub generator: DenoiserNet,
    /// Exponential moving average of the generator weights.
    pub generator_ema: DenoiserNet,
    pub ema_decay: f64,
    pub fake: DenoiserNet,
    pub opt_generator: AdamW,
    pub opt_fake: AdamW,
    pub step: usize,
    pub warmup_steps: usize,
    pub log: Vec<DistillLogEntry>,
}

impl DistillState {
    /// Generator and fake score both start as copies of the teacher.
    pub fn new(teacher: &DenoiserNet, cfg: &RmdConfig) -> Self {
        let n = teacher.param_count();
        Self {
            generator: teacher.clone(),
            generator_ema: teacher.clone(),
            ema_decay: cfg.ema_decay,
            fake: teacher.clone(),
            opt_generator: AdamW::new(n, cfg.lr_generator, 0.0, cfg.beta2, 0.0),
            opt_fake: AdamW::new(n, cfg.lr_fake, 0.0, cfg.beta2, 0.0),
            step: 0,
            warmup_steps: cfg.warmup_steps,
            log: Vec::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        if self.step < self.warmup_steps {
            Phase::Warmup
        } else {
            Phase::Full
        }
    }
}

fn check_finite(what: &str, step: usize, x: &ImageGrid) -> Result<()> {
    if x.is_finite() {
        return Ok(());
    }
    let bad = x.data().iter().filter(|v| !v.is_finite()).count();
    let finite: Vec<f64> = x.data().iter().copied().filter(|v| v.is_finite()).collect();
    let max = finite.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Err(Error::NonFinite {
        context: format!("distillation step {step}: {what}"),
        detail: format!("{bad} of {} entries non-finite, max finite |value| {max:.3e}", x.len()),
    })
}

/// One iteration: rollouts, one (stage, t) draw, fake-score update, then the
/// generator update.
pub fn train_step(
    state: &mut DistillState,
    teacher: &DenoiserNet,
    partition: &TrajectoryPartition,
    cfg: &RmdConfig,
    class_ids: &[usize],
    rng: &mut SeededRng,
) -> Result<()> {
    if class_ids.is_empty() {
        return Err(Error::Invalid("empty distillation batch".into()));
    }
    let step = state.step;
    let phase = state.phase();
    let draw = sample_stage_and_timestep(partition, phase, &cfg.stage_weights, rng);
    let mut chains = Vec::with_capacity(class_ids.len());
    for &class_id in class_ids {
        let seed = (rng.uniform() * (1u64 << 53) as f64) as u64;
        let states = generate_cascade_states(&state.generator, class_id, partition, cfg.n, cfg.alpha_inference, seed)?;
        let chain = TransformChain::forward(&state.generator, states, &draw, partition.t_max, cfg.alpha, rng)?;
        check_finite("upsampled state", step, &chain.x_high)?;
        chains.push(chain);
    }
    let inv_b = 1.0 / class_ids.len() as f64;

    let mut fake_grad = GradientVector::zeros(state.fake.param_count());
    let mut fake_loss = 0.0;
    for (chain, &class_id) in chains.iter().zip(class_ids) {
        let (l, g) = fake_score_loss(&state.fake, &chain.x_high, chain.sigma_target, class_id, &chain.clean_target, cfg.snr_clamp)?;
        fake_loss += l * inv_b;
        fake_grad.add_assign(&g);
    }
    fake_grad.scale(inv_b);
    if !fake_loss.is_finite() {
        return Err(Error::NonFinite {
            context: format!("distillation step {step}: fake-score loss"),
            detail: format!("loss {fake_loss}, grad norm {}", fake_grad.norm()),
        });
    }
    let fake_report = state.opt_fake.step(&mut state.fake.params, &fake_grad, cfg.clip_norm)?;

    let weight = cfg.lambda(draw.stage) * inv_b;
    let mut gen_grad = GradientVector::zeros(state.generator.param_count());
    let mut gen_loss = 0.0;
    for (chain, &class_id) in chains.iter().zip(class_ids) {
        let (l, gx) = generator_loss(&chain.x_high, chain.sigma_target, &state.fake, teacher, class_id)?;
        check_finite("generator loss gradient", step, &gx)?;
        gen_loss += l * inv_b;
        chain.backward(&state.generator, &gx.scale(weight), &mut gen_grad.0)?;
    }
    let gen_report = state.opt_generator.step(&mut state.generator.params, &gen_grad, cfg.clip_norm)?;
    let d = state.ema_decay;
    for (e, p) in state.generator_ema.params.iter_mut().zip(&state.generator.params) {
        *e = d * *e + (1.0 - d) * p;
    }

    state.log.push(DistillLogEntry {
        step,
        phase,
        stage: draw.stage,
        teacher_t: draw.teacher_t,
        shifted_t: draw.shifted_t,
        generator_loss: gen_loss,
        fake_loss,
        generator_grad_norm: gen_report.grad_norm,
        fake_grad_norm: fake_report.grad_norm,
    });
    state.step += 1;
    Ok(())
}

/// Runs `cfg.steps` iterations with uniformly drawn class batches.
pub fn distill(
    teacher: &DenoiserNet,
    partition: &TrajectoryPartition,
    cfg: &RmdConfig,
    rng: &SeededRng,
) -> Result<DistillState> {
    let train_p = training_partition(partition, cfg.cross_resolution)?;
    cfg.validate(train_p.k())?;
    let mut state = DistillState::new(teacher, cfg);
    let mut rng = rng.derive("distill");
    for _ in 0..cfg.steps {
        let classes: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(CLASS_COUNT)).collect();
        train_step(&mut state, teacher, &train_p, cfg, &classes, &mut rng)?;
    }
    Ok(state)
}
