//! Multi-resolution cascaded inference: Euler steps within a stage,
//! denoise-upsample-renoise at stage boundaries, and a full trace.

use crate::error::{Error, Result};
use crate::grid::{bilinear_upsample_adjoint, gaussian_noise, upsample_to, ImageGrid, SeededRng};
use crate::net::{DenoiserNet, Tape};
use crate::rmd::mix_noise;
use crate::schedule::{inference_schedule, ScheduleStep, TrajectoryPartition};

/// Anything that predicts the flow velocity `ε - x0`.
pub trait VelocityModel {
    fn velocity(&self, x: &ImageGrid, sigma: f64, class_id: Option<usize>) -> Result<ImageGrid>;
}

impl VelocityModel for DenoiserNet {
    fn velocity(&self, x: &ImageGrid, sigma: f64, class_id: Option<usize>) -> Result<ImageGrid> {
        self.forward(x, sigma, class_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeParams {
    pub partition: TrajectoryPartition,
    pub n: usize,
    pub alpha_inference: f64,
    pub class_id: usize,
    pub seed: u64,
}

impl CascadeParams {
    fn validate(&self) -> Result<()> {
        if self.n < self.partition.k() {
            return Err(Error::Schedule(format!(
                "N = {} is smaller than K = {}",
                self.n,
                self.partition.k()
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha_inference) {
            return Err(Error::Domain {
                value: self.alpha_inference,
                domain: "alpha in [0, 1]",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub stage: usize,
    pub teacher_t: f64,
    pub shifted_t: f64,
    pub sigma: f64,
    pub resolution: usize,
    /// The step ends by moving to the next stage.
    pub transition: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTrace {
    pub records: Vec<TraceRecord>,
    pub k: usize,
    pub final_resolution: usize,
    pub t_max: f64,
}

impl InferenceTrace {
    pub fn transitions(&self) -> usize {
        self.records.iter().filter(|r| r.transition).count()
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.resolution).collect()
    }

    /// Checks the structural invariants of a cascaded run against `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Invalid(format!("inference trace: {m}")));
        if self.records.len() != n {
            return fail(format!("{} records, expected {n}", self.records.len()));
        }
        if self.transitions() + 1 != self.k {
            return fail(format!("{} transitions for K = {}", self.transitions(), self.k));
        }
        for w in self.records.windows(2) {
            if w[1].resolution < w[0].resolution {
                return fail(format!("resolution decreases at step {}", w[1].step));
            }
            if (w[1].resolution != w[0].resolution) != w[0].transition {
                return fail(format!("resolution change and transition flag disagree at step {}", w[0].step));
            }
            if w[1].teacher_t >= w[0].teacher_t {
                return fail(format!("teacher logSNR not increasing at step {}", w[1].step));
            }
        }
        match self.records.last() {
            Some(r) if r.resolution == self.final_resolution && !r.transition => Ok(()),
            _ => fail("run does not end at the final resolution".into()),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,stage,teacher_t,shifted_t,sigma,resolution,transition\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{:.9},{},{}\n",
                r.step, r.stage, r.teacher_t, r.shifted_t, r.sigma, r.resolution, r.transition as u8
            ));
        }
        s
    }
}

/// What a step does after the velocity prediction.
#[derive(Debug, Clone, PartialEq)]
pub enum StepKind {
    /// Euler move to `next_sigma` at the same resolution.
    Denoise { next_sigma: f64 },
    /// Clean estimate, upsample, re-noise to `next_sigma` at `next_res`.
    Transition {
        next_sigma: f64,
        next_res: usize,
        alpha: f64,
        fresh: ImageGrid,
    },
    /// Last step: return the clean estimate.
    Final,
}

/// Coefficients `(a_x, a_v)` with `reinject = a_x·U(x) + a_v·U(v) + σ'β·ξ`.
pub fn reinject_coefficients(sigma: f64, next_sigma: f64, alpha: f64) -> (f64, f64) {
    let a_x = (1.0 - next_sigma) + next_sigma * alpha;
    let a_v = -sigma * (1.0 - next_sigma) + next_sigma * alpha * (1.0 - sigma);
    (a_x, a_v)
}

/// Denoise to `x0 = x - σv`, recover `ε̂ = x + (1-σ)v`, upsample both to
/// `res` and re-noise: `(1-σ')U(x0) + σ'·mix(U(ε̂), ξ, α)`.
pub fn reinject(
    x: &ImageGrid,
    v: &ImageGrid,
    sigma: f64,
    next_sigma: f64,
    res: usize,
    alpha: f64,
    fresh: &ImageGrid,
) -> Result<ImageGrid> {
    x.check_shape(v)?;
    let x0 = x.lin_comb(1.0, v, -sigma);
    let eps_hat = x.lin_comb(1.0, v, 1.0 - sigma);
    let up_x0 = upsample_to(&x0, res, res)?;
    let up_eps = upsample_to(&eps_hat, res, res)?;
    let noise = mix_noise(&up_eps, fresh, alpha)?;
    Ok(up_x0.lin_comb(1.0 - next_sigma, &noise, next_sigma))
}

/// Adjoint of [`reinject`] with respect to `(x, v)` for an upstream gradient
/// on its output.
pub fn reinject_adjoint(
    upstream: &ImageGrid,
    src: (usize, usize),
    sigma: f64,
    next_sigma: f64,
    alpha: f64,
) -> Result<(ImageGrid, ImageGrid)> {
    let g = bilinear_upsample_adjoint(upstream, src.0, src.1)?;
    let (a_x, a_v) = reinject_coefficients(sigma, next_sigma, alpha);
    Ok((g.scale(a_x), g.scale(a_v)))
}

/// Advances one step given the velocity prediction.
pub fn apply_step(x: &ImageGrid, v: &ImageGrid, sigma: f64, kind: &StepKind) -> Result<ImageGrid> {
    match kind {
        StepKind::Denoise { next_sigma } => Ok(x.lin_comb(1.0, v, next_sigma - sigma)),
        StepKind::Transition {
            next_sigma,
            next_res,
            alpha,
            fresh,
        } => reinject(x, v, sigma, *next_sigma, *next_res, *alpha, fresh),
        StepKind::Final => Ok(x.lin_comb(1.0, v, -sigma)),
    }
}

fn trace_and_kinds(
    sched: &[ScheduleStep],
    p: &TrajectoryPartition,
    alpha: f64,
    channels: usize,
    rng: &SeededRng,
) -> (InferenceTrace, Vec<StepKind>) {
    let mut records = Vec::with_capacity(sched.len());
    let mut kinds = Vec::with_capacity(sched.len());
    for (j, s) in sched.iter().enumerate() {
        let kind = match sched.get(j + 1) {
            None => StepKind::Final,
            Some(nx) if nx.stage == s.stage => StepKind::Denoise { next_sigma: nx.sigma },
            Some(nx) => StepKind::Transition {
                next_sigma: nx.sigma,
                next_res: nx.resolution,
                alpha,
                fresh: gaussian_noise(
                    (channels, nx.resolution, nx.resolution),
                    &mut rng.derive_indexed("reinject", j as u64),
                ),
            },
        };
        records.push(TraceRecord {
            step: j,
            stage: s.stage,
            teacher_t: s.teacher_t,
            shifted_t: s.shifted_t,
            sigma: s.sigma,
            resolution: s.resolution,
            transition: matches!(kind, StepKind::Transition { .. }),
        });
        kinds.push(kind);
    }
    let trace = InferenceTrace {
        records,
        k: p.k(),
        final_resolution: p.final_resolution(),
        t_max: p.t_max,
    };
    (trace, kinds)
}

/// Runs the cascade with any velocity model.
pub fn infer_with<M: VelocityModel>(model: &M, channels: usize, p: &CascadeParams) -> Result<(ImageGrid, InferenceTrace)> {
    p.validate()?;
    let sched = inference_schedule(p.n, &p.partition)?;
    let rng = SeededRng::new(p.seed);
    let (trace, kinds) = trace_and_kinds(&sched, &p.partition, p.alpha_inference, channels, &rng);
    let r1 = sched[0].resolution;
    let mut x = gaussian_noise((channels, r1, r1), &mut rng.derive("init"));
    for (s, kind) in sched.iter().zip(&kinds) {
        let v = model.velocity(&x, s.sigma, Some(p.class_id))?;
        x = apply_step(&x, &v, s.sigma, kind)?;
    }
    if !x.is_finite() {
        return Err(Error::NonFinite {
            context: "cascaded inference output".into(),
            detail: format!("class {}, seed {}", p.class_id, p.seed),
        });
    }
    trace.validate(p.n)?;
    Ok((x, trace))
}

pub fn infer(g: &DenoiserNet, p: &CascadeParams) -> Result<(ImageGrid, InferenceTrace)> {
    infer_with(g, g.arch().layers[0].in_channels, p)
}

/// The same state machine driven by the undistilled teacher.
pub fn naive_cascade_infer(teacher: &DenoiserNet, p: &CascadeParams) -> Result<(ImageGrid, InferenceTrace)> {
    infer(teacher, p)
}

/// One recorded step of a differentiable rollout.
#[derive(Debug, Clone)]
pub struct RolloutStep {
    pub stage: usize,
    pub shifted_t: f64,
    pub sigma: f64,
    /// Noisy state before the step.
    pub input: ImageGrid,
    pub velocity: ImageGrid,
    pub kind: StepKind,
    tape: Tape,
}

impl RolloutStep {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }
}

/// A cascaded run that keeps what is needed to backpropagate into the
/// generator parameters.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub steps: Vec<RolloutStep>,
    pub output: ImageGrid,
    pub trace: InferenceTrace,
    pub class_id: usize,
}

impl Rollout {
    pub fn run(g: &DenoiserNet, p: &CascadeParams) -> Result<Rollout> {
        p.validate()?;
        let channels = g.arch().layers[0].in_channels;
        let sched = inference_schedule(p.n, &p.partition)?;
        let rng = SeededRng::new(p.seed);
        let (trace, kinds) = trace_and_kinds(&sched, &p.partition, p.alpha_inference, channels, &rng);
        let r1 = sched[0].resolution;
        let mut x = gaussian_noise((channels, r1, r1), &mut rng.derive("init"));
        let mut steps = Vec::with_capacity(sched.len());
        for (s, kind) in sched.iter().zip(kinds) {
            let (v, tape) = g.forward_with_tape(&x, s.sigma, Some(p.class_id))?;
            let next = apply_step(&x, &v, s.sigma, &kind)?;
            steps.push(RolloutStep {
                stage: s.stage,
                shifted_t: s.shifted_t,
                sigma: s.sigma,
                input: std::mem::replace(&mut x, next),
                velocity: v,
                kind,
                tape,
            });
        }
        trace.validate(p.n)?;
        Ok(Rollout {
            steps,
            output: x,
            trace,
            class_id: p.class_id,
        })
    }

    /// Backpropagates a gradient on the input of step `m` into `grad`
    /// through steps `m-1, …, 0`. Returns the gradient on the initial noise.
    pub fn backward_to_params(&self, g: &DenoiserNet, m: usize, upstream: &ImageGrid, grad: &mut [f64]) -> Result<ImageGrid> {
        if m >= self.steps.len() {
            return Err(Error::Invalid(format!("rollout has no step {m}")));
        }
        let mut gx = upstream.clone();
        for st in self.steps[..m].iter().rev() {
            gx = match &st.kind {
                StepKind::Denoise { next_sigma } => {
                    let c = next_sigma - st.sigma;
                    let gin = g.backward_from_tape(&st.tape, &gx.scale(c), grad)?;
                    gx.add(&gin)
                }
                StepKind::Transition { next_sigma, alpha, .. } => {
                    let src = (st.input.height(), st.input.width());
                    let (g_direct, g_v) = reinject_adjoint(&gx, src, st.sigma, *next_sigma, *alpha)?;
                    let gin = g.backward_from_tape(&st.tape, &g_v, grad)?;
                    g_direct.add(&gin)
                }
                StepKind::Final => return Err(Error::Invalid("final step precedes another step".into())),
            };
        }
        Ok(gx)
    }
}
