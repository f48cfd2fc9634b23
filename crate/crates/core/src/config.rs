//! Run configuration: one TOML document covering every tunable, named
//! presets, and per-purpose seed derivation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataParams;
use crate::diffusion::{NetConfig, TeacherConfig};
use crate::error::{Error, Result};
use crate::grid::SeededRng;
use crate::rmd::RmdConfig;
use crate::schedule::{build_partition, LogSnr, TrajectoryPartition, DEFAULT_T_MAX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// logSNR thresholds between consecutive stages, decreasing noise order.
    pub thresholds: Vec<f64>,
    pub resolutions: Vec<usize>,
    pub flow_shift: f64,
    pub t_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![-2.5],
            resolutions: vec![8, 16],
            flow_shift: 3.0,
            t_max: DEFAULT_T_MAX,
        }
    }
}

impl ScheduleConfig {
    pub fn partition(&self) -> Result<TrajectoryPartition> {
        let th: Vec<LogSnr> = self.thresholds.iter().map(|&l| LogSnr(l)).collect();
        build_partition(&th, &self.resolutions, self.flow_shift, self.t_max)
            .map_err(|e| Error::config("schedule", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples per method.
    pub samples: usize,
    pub permutations: usize,
    /// Euler steps for the teacher reference.
    pub reference_steps: usize,
    /// Also distil a generator without cross-resolution states.
    pub no_rm_arm: bool,
    /// Tiles per contact sheet.
    pub contact_tiles: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 256,
            permutations: 200,
            reference_steps: 32,
            no_rm_arm: true,
            contact_tiles: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub schedule: ScheduleConfig,
    pub data: DataParams,
    pub net: NetConfig,
    pub teacher: TeacherConfig,
    pub rmd: RmdConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            schedule: ScheduleConfig::default(),
            data: DataParams::default(),
            net: NetConfig::default(),
            teacher: TeacherConfig::default(),
            rmd: RmdConfig {
                steps: 3000,
                ..RmdConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 4] = ["toy-default", "sdxl-like", "sd35-like", "wan-like"];

impl RunConfig {
    /// Named presets. All share the toy training budgets; they differ in the
    /// trajectory division and step count.
    pub fn preset(name: &str) -> Result<RunConfig> {
        let mut c = RunConfig {
            run_dir: PathBuf::from(format!("runs/{name}")),
            ..RunConfig::default()
        };
        match name {
            "toy-default" | "sd35-like" => {}
            "sdxl-like" => {
                // split at t = 502 out of 1000
                c.schedule.thresholds = vec![2.0 * (0.498f64 / 0.502).ln()];
                c.schedule.flow_shift = 1.0;
            }
            "wan-like" => {
                c.schedule.thresholds = vec![-4.0];
                c.schedule.resolutions = vec![8, 12];
                c.schedule.flow_shift = 5.0;
                c.data.high_res = 12;
                c.rmd.n = 6;
            }
            other => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset `{other}`, expected one of {}", PRESETS.join(", ")),
                ))
            }
        }
        Ok(c)
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let c: RunConfig = toml::from_str(text).map_err(|e| {
            let key = e.span().map(|s| text[s].trim().to_string()).unwrap_or_default();
            Error::config(key, e.message().to_string())
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.schedule.partition()?;
        self.data.validate()?;
        if p.final_resolution() != self.data.high_res {
            return Err(Error::config(
                "schedule.resolutions",
                format!(
                    "final resolution {} differs from data.high_res {}",
                    p.final_resolution(),
                    self.data.high_res
                ),
            ));
        }
        self.net.arch().validate().map_err(|e| Error::config("net", e.to_string()))?;
        if self.teacher.batch_size == 0 {
            return Err(Error::config("teacher.batch_size", "must be positive"));
        }
        if self.teacher.sample_steps == 0 {
            return Err(Error::config("teacher.sample_steps", "must be positive"));
        }
        self.rmd.validate(p.k())?;
        if self.eval.samples < 4 {
            return Err(Error::config("eval.samples", "need at least 4 samples"));
        }
        if self.eval.reference_steps == 0 {
            return Err(Error::config("eval.reference_steps", "must be positive"));
        }
        Ok(())
    }

    /// Independent stream for one purpose, derived from the root seed.
    pub fn rng(&self, purpose: &str) -> SeededRng {
        SeededRng::new(self.seed).derive(purpose)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::inference_schedule;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let c = RunConfig::preset(name).unwrap();
            c.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
        assert!(RunConfig::preset("sd4").is_err());
    }

    #[test]
    fn preset_schedules() {
        let steps = |name: &str| {
            let c = RunConfig::preset(name).unwrap();
            inference_schedule(c.rmd.n, &c.schedule.partition().unwrap())
                .unwrap()
                .iter()
                .map(|s| s.shifted_t.round() as i64)
                .collect::<Vec<_>>()
        };
        assert_eq!(steps("sd35-like"), vec![1000, 947, 750, 500]);
        assert_eq!(steps("sdxl-like"), vec![1000, 857, 500, 250]);
        let wan = steps("wan-like");
        assert_eq!(wan.len(), 6);
        // 909 -> 937.5 exactly, so rounding lands on 938
        assert!((wan[1] - 974).abs() <= 1 && (wan[2] - 937).abs() <= 1, "{wan:?}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("seed = 1\n[rmd]\nalpah = 0.3\n").unwrap_err();
        assert!(err.to_string().contains("alpah"), "{err}");
        assert!(RunConfig::from_toml("sed = 1\n").is_err());
    }

    #[test]
    fn partial_config_uses_defaults() {
        let c = RunConfig::from_toml("seed = 7\n[rmd]\nalpha = 0.5\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.rmd.alpha, 0.5);
        assert_eq!(c.data, DataParams::default());
    }

    #[test]
    fn invalid_values_name_their_key() {
        let err = RunConfig::from_toml("[data]\nintensity_jitter = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("data.intensity_jitter"), "{err}");
        let err = RunConfig::from_toml("[rmd]\nalpha = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("rmd.alpha"), "{err}");
        let err = RunConfig::from_toml("[data]\nhigh_res = 20\n").unwrap_err();
        assert!(err.to_string().contains("schedule.resolutions"), "{err}");
    }

    #[test]
    fn seed_streams_differ_by_purpose() {
        let c = RunConfig::default();
        assert_ne!(c.rng("data").seed(), c.rng("teacher").seed());
        assert_eq!(c.rng("data").seed(), c.rng("data").seed());
    }
}
