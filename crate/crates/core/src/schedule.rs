//! Timestep and noise-level arithmetic.
//!
//! Under the rectified-flow interpolation `x_t = (1 - σ) x0 + σ ε` the
//! log signal-to-noise ratio is `2 ln((1 - σ) / σ)`. A trajectory is split at
//! logSNR thresholds into stages, each sampled at its own resolution; the
//! timesteps a stage sees are shifted so that a low-resolution state carries
//! the same effective corruption as the teacher's state at full resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_T_MAX: f64 = 1000.0;

/// Log signal-to-noise ratio.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct LogSnr(pub f64);

/// Fraction of noise in the interpolation; 1 is pure noise, 0 is clean data.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Sigma(pub f64);

impl LogSnr {
    pub fn get(self) -> f64 {
        self.0
    }
}

impl Sigma {
    pub fn get(self) -> f64 {
        self.0
    }
}

pub fn logsnr_to_sigma(l: LogSnr) -> Sigma {
    Sigma(1.0 / (1.0 + (l.0 / 2.0).exp()))
}

pub fn sigma_to_logsnr(s: Sigma) -> Result<LogSnr> {
    let s = s.0;
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::Domain {
            value: s,
            domain: "open interval (0, 1)",
        });
    }
    Ok(LogSnr(2.0 * ((1.0 - s).ln() - s.ln())))
}

/// Moves a logSNR from the teacher resolution `r_k` to resolution `r_i`.
///
/// Lower resolutions map to lower logSNR (more noise at matched state).
/// Composes additively: `(a -> b)` then `(b -> c)` equals `(a -> c)`.
pub fn shift_logsnr(l: LogSnr, r_i: usize, r_k: usize) -> LogSnr {
    LogSnr(l.0 + 2.0 * (r_i as f64 / r_k as f64).ln())
}

/// Resolution shift applied directly to σ. The endpoints 0 and 1 are fixed.
pub fn shift_sigma(s: Sigma, r_i: usize, r_k: usize) -> Sigma {
    if s.0 >= 1.0 || s.0 <= 0.0 || r_i == r_k {
        return s;
    }
    // s is strictly inside (0, 1) here
    let l = sigma_to_logsnr(s).expect("sigma in open unit interval");
    logsnr_to_sigma(shift_logsnr(l, r_i, r_k))
}

/// Flow-shift reparameterization `s u / (1 + (s - 1) u)`.
pub fn apply_flow_shift(u: f64, shift: f64) -> Sigma {
    Sigma(shift * u / (1.0 + (shift - 1.0) * u))
}

/// One resolution stage. Intervals are `(low, high)` timestep pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionStage {
    /// 1-based stage index.
    pub index: usize,
    pub resolution: usize,
    pub teacher_interval: (f64, f64),
    pub shifted_interval: (f64, f64),
}

impl ResolutionStage {
    pub fn contains_teacher(&self, t: f64) -> bool {
        t >= self.teacher_interval.0 && t <= self.teacher_interval.1
    }

    pub fn contains_shifted(&self, t: f64) -> bool {
        t >= self.shifted_interval.0 && t <= self.shifted_interval.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPartition {
    pub stages: Vec<ResolutionStage>,
    pub thresholds: Vec<LogSnr>,
    pub flow_shift: f64,
    pub t_max: f64,
}

pub fn build_partition(
    thresholds: &[LogSnr],
    resolutions: &[usize],
    flow_shift: f64,
    t_max: f64,
) -> Result<TrajectoryPartition> {
    if resolutions.len() != thresholds.len() + 1 {
        return Err(Error::Schedule(format!(
            "{} resolutions need {} thresholds, got {}",
            resolutions.len(),
            resolutions.len().saturating_sub(1),
            thresholds.len()
        )));
    }
    if resolutions.iter().any(|&r| r == 0) {
        return Err(Error::Schedule("resolutions must be positive".into()));
    }
    if resolutions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Schedule(format!(
            "resolutions must be strictly increasing: {resolutions:?}"
        )));
    }
    if thresholds.iter().any(|l| !l.0.is_finite()) {
        return Err(Error::Schedule("thresholds must be finite".into()));
    }
    if thresholds.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::Schedule(format!(
            "thresholds must be strictly increasing in logSNR: {:?}",
            thresholds.iter().map(|l| l.0).collect::<Vec<_>>()
        )));
    }
    if !(flow_shift >= 1.0 && flow_shift.is_finite()) {
        return Err(Error::Schedule(format!("flow shift must be >= 1, got {flow_shift}")));
    }
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(Error::Schedule(format!("t_max must be positive, got {t_max}")));
    }

    let r_k = *resolutions.last().expect("at least one resolution");
    // boundary sigmas from high noise to low noise: 1, σ(l_1), ..., σ(l_{K-1}), 0
    let mut bounds = Vec::with_capacity(resolutions.len() + 1);
    bounds.push(1.0);
    bounds.extend(thresholds.iter().map(|&l| logsnr_to_sigma(l).0));
    bounds.push(0.0);

    let stages = resolutions
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let (hi, lo) = (bounds[i], bounds[i + 1]);
            ResolutionStage {
                index: i + 1,
                resolution: r,
                teacher_interval: (t_max * lo, t_max * hi),
                shifted_interval: (
                    t_max * shift_sigma(Sigma(lo), r, r_k).0,
                    t_max * shift_sigma(Sigma(hi), r, r_k).0,
                ),
            }
        })
        .collect();

    Ok(TrajectoryPartition {
        stages,
        thresholds: thresholds.to_vec(),
        flow_shift,
        t_max,
    })
}

impl TrajectoryPartition {
    pub fn k(&self) -> usize {
        self.stages.len()
    }

    pub fn final_resolution(&self) -> usize {
        self.stages.last().map(|s| s.resolution).unwrap_or(0)
    }

    pub fn stage(&self, index: usize) -> &ResolutionStage {
        &self.stages[index - 1]
    }

    /// Stage owning teacher timestep `t`. A boundary belongs to the earlier
    /// (higher-noise) stage.
    pub fn stage_of(&self, t: f64) -> usize {
        self.stages
            .iter()
            .find(|s| t >= s.teacher_interval.0)
            .map(|s| s.index)
            .unwrap_or(self.k())
    }

    /// Teacher timestep -> shifted timestep at `stage`'s resolution.
    pub fn shift_timestep(&self, t: f64, stage: usize) -> f64 {
        let r = self.stage(stage).resolution;
        let s = (t / self.t_max).clamp(0.0, 1.0);
        self.t_max * shift_sigma(Sigma(s), r, self.final_resolution()).0
    }

    /// Shifted timestep at `stage` -> teacher timestep.
    pub fn unshift_timestep(&self, tau: f64, stage: usize) -> f64 {
        let r = self.stage(stage).resolution;
        let s = (tau / self.t_max).clamp(0.0, 1.0);
        self.t_max * shift_sigma(Sigma(s), self.final_resolution(), r).0
    }

    pub fn sigma_of(&self, t: f64) -> Sigma {
        Sigma((t / self.t_max).clamp(0.0, 1.0))
    }
}

pub fn map_timestep(t: f64, p: &TrajectoryPartition) -> (usize, f64) {
    let stage = p.stage_of(t);
    (stage, p.shift_timestep(t, stage))
}

/// One step of a cascaded sampling schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub step: usize,
    pub stage: usize,
    pub resolution: usize,
    /// Teacher-space timestep.
    pub teacher_t: f64,
    /// Resolution-shifted timestep actually fed to the model.
    pub shifted_t: f64,
    /// σ at the shifted timestep.
    pub sigma: f64,
}

impl ScheduleStep {
    /// logSNR of the teacher-space timestep; infinite at the endpoints.
    pub fn teacher_logsnr(&self, t_max: f64) -> f64 {
        let s = self.teacher_t / t_max;
        if s >= 1.0 {
            f64::NEG_INFINITY
        } else if s <= 0.0 {
            f64::INFINITY
        } else {
            2.0 * ((1.0 - s).ln() - s.ln())
        }
    }
}

/// `n` uniform fractions `1 - j/n`, flow-shifted, then split into stages.
pub fn inference_schedule(n: usize, p: &TrajectoryPartition) -> Result<Vec<ScheduleStep>> {
    if n < p.k() {
        return Err(Error::Schedule(format!(
            "{n} steps cannot cover {} stages",
            p.k()
        )));
    }
    let steps: Vec<ScheduleStep> = (0..n)
        .map(|j| {
            let u = 1.0 - j as f64 / n as f64;
            let teacher_t = p.t_max * apply_flow_shift(u, p.flow_shift).0;
            let (stage, shifted_t) = map_timestep(teacher_t, p);
            ScheduleStep {
                step: j,
                stage,
                resolution: p.stage(stage).resolution,
                teacher_t,
                shifted_t,
                sigma: shifted_t / p.t_max,
            }
        })
        .collect();
    for stage in &p.stages {
        if !steps.iter().any(|s| s.stage == stage.index) {
            return Err(Error::Schedule(format!(
                "stage {} (t in [{:.1}, {:.1}]) receives no step with n={n}",
                stage.index, stage.teacher_interval.0, stage.teacher_interval.1
            )));
        }
    }
    Ok(steps)
}

/// Resolutions assigned to each schedule step, in order.
pub fn schedule_resolutions(steps: &[ScheduleStep]) -> Vec<usize> {
    steps.iter().map(|s| s.resolution).collect()
}
