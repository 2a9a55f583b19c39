//! Run configuration: a flat JSON object with dotted keys
//! (`"sampler.steps": 20`) layered over defaults, then `--set key=value`
//! overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::denoise::DenoiserConfig;
use crate::error::{invalid, Result};
use crate::metrics::{
    FlowThresholds, DEFAULT_AUC_THRESHOLDS, DEFAULT_FMR_TAU, DEFAULT_INLIER_TAU, DEFAULT_NFMR_K, DEFAULT_NFMR_TAU,
    DEFAULT_RMSE_TAU,
};
use crate::otsolve::IteratedOtConfig;
use crate::sampler::{ExtractMode, SamplerConfig};
use crate::schedule::{DiffusionSchedule, ScheduleKind, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_TIMESTEPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    Rigid,
    Deformable,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: DEFAULT_TIMESTEPS,
            kind: ScheduleKind::LinearBeta,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::build(self.timesteps, self.kind, self.beta_min, self.beta_max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractKind {
    Topk,
    #[default]
    MutualArgmax,
    Threshold,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub mode: ExtractKind,
    pub k: usize,
    pub thresh: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            mode: ExtractKind::MutualArgmax,
            k: 256,
            thresh: 0.1,
        }
    }
}

impl ExtractConfig {
    pub fn mode(&self) -> ExtractMode {
        match self.mode {
            ExtractKind::Topk => ExtractMode::TopK { k: self.k },
            ExtractKind::MutualArgmax => ExtractMode::MutualArgmax,
            ExtractKind::Threshold => ExtractMode::Threshold { thresh: self.thresh },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub noise: f64,
    pub overlap: f64,
    pub rho: f64,
    pub trials: usize,
    pub feature_dim: usize,
    pub amp: f64,
    pub freq: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 128,
            noise: 0.01,
            overlap: 1.0,
            rho: 0.1,
            trials: 10,
            feature_dim: crate::geometry::DEFAULT_FEATURE_DIM,
            amp: 0.1,
            freq: 3.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub inlier_tau: f64,
    pub fmr_tau: f64,
    pub rmse_tau: f64,
    pub nfmr_k: usize,
    pub nfmr_tau: f64,
    pub flow: FlowThresholds,
    pub auc_thresholds: Vec<f64>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            inlier_tau: DEFAULT_INLIER_TAU,
            fmr_tau: DEFAULT_FMR_TAU,
            rmse_tau: DEFAULT_RMSE_TAU,
            nfmr_k: DEFAULT_NFMR_K,
            nfmr_tau: DEFAULT_NFMR_TAU,
            flow: FlowThresholds::default(),
            auc_thresholds: DEFAULT_AUC_THRESHOLDS.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Theorem-1 instances; sizes cycle through 4, 5, 6 unless `n` is set.
    pub trials: usize,
    pub n: Option<usize>,
    pub warp_samples: usize,
    /// Use the source cloud as the target.
    pub identical: bool,
    pub seed: u64,
    pub theorem2_trials: usize,
    pub theorem2_n: usize,
    pub theorem2_rho: f64,
    pub theorem2_outer: usize,
    pub iterated: IteratedOtConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            trials: 200,
            n: None,
            warp_samples: 32,
            identical: false,
            seed: 0,
            theorem2_trials: 20,
            theorem2_n: 16,
            theorem2_rho: 0.9,
            theorem2_outer: 10,
            iterated: IteratedOtConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub steps: Vec<usize>,
    pub rho: Vec<f64>,
    pub overlap: Vec<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            steps: vec![1, 5, 10, 20],
            rho: vec![0.1, 0.2],
            overlap: vec![1.0, 0.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub denoiser: DenoiserConfig,
    pub extract: ExtractConfig,
    pub synth: SynthConfig,
    pub metrics: MetricConfig,
    pub verify: VerifyConfig,
    pub bench: BenchConfig,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults, then the file's keys, then each `key=value` override.
    /// Values that do not parse as JSON are taken as strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut flat = Map::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            match serde_json::from_str::<Value>(&text)? {
                Value::Object(obj) => flat.extend(obj),
                _ => return Err(invalid(format!("{}: config must be a JSON object", path.display()))),
            }
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| invalid(format!("override `{item}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            flat.insert(key.trim().to_string(), value);
        }
        Self::from_flat(&flat)
    }

    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        for (key, value) in flat {
            set_dotted(&mut tree, key, value.clone())?;
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.denoiser.validate()?;
        if self.sampler.steps == 0 || self.sampler.steps > self.schedule.timesteps {
            return Err(invalid(format!(
                "sampler.steps must lie in 1..={}, got {}",
                self.schedule.timesteps, self.sampler.steps
            )));
        }
        if self.bench.steps.iter().any(|&s| s == 0 || s > self.schedule.timesteps) {
            return Err(invalid("bench.steps entries must lie in 1..=schedule.timesteps"));
        }
        if !(0.0..=1.0).contains(&self.synth.rho) || self.bench.rho.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(invalid("rho values must lie in [0, 1]"));
        }
        if !(self.synth.overlap > 0.0 && self.synth.overlap <= 1.0)
            || self.bench.overlap.iter().any(|o| !(*o > 0.0 && *o <= 1.0))
        {
            return Err(invalid("overlap values must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Flat dotted-key view of the full configuration.
    pub fn to_flat(&self) -> Result<Map<String, Value>> {
        let mut out = Map::new();
        flatten("", &serde_json::to_value(self)?, &mut out);
        Ok(out)
    }
}

fn set_dotted(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| invalid(format!("config key `{key}` descends into a non-object")))?;
        if depth + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(invalid(format!("unknown config key `{key}`")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| invalid(format!("unknown config key `{key}`")))?;
    }
    Err(invalid("empty config key"))
}

fn flatten(prefix: &str, value: &Value, out: &mut Map<String, Value>) {
    match value {
        Value::Object(obj) => {
            for (k, v) in obj {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_overrides_apply() {
        let cfg = RunConfig::load(
            None,
            &[
                "sampler.steps=5".into(),
                "task=deformable".into(),
                "metrics.flow.strict_abs=0.01".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.sampler.steps, 5);
        assert_eq!(cfg.task, Task::Deformable);
        assert_eq!(cfg.metrics.flow.strict_abs, 0.01);
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"sampler.steps": 7, "synth.rho": 0.5}"#).unwrap();
        let cfg = RunConfig::load(Some(&path), &["sampler.steps=3".into()]).unwrap();
        assert_eq!(cfg.sampler.steps, 3);
        assert_eq!(cfg.synth.rho, 0.5);
    }

    #[test]
    fn unknown_and_invalid_keys_rejected() {
        assert!(RunConfig::load(None, &["sampler.stepz=5".into()]).is_err());
        assert!(RunConfig::load(None, &["sampler.steps=0".into()]).is_err());
        assert!(RunConfig::load(None, &["synth.rho=2".into()]).is_err());
        assert!(RunConfig::load(None, &["nokey".into()]).is_err());
        assert!(RunConfig::load(None, &["sampler.steps.x=1".into()]).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let cfg = RunConfig::load(None, &["bench.rho=[0.3]".into(), "verify.n=5".into()]).unwrap();
        let flat = cfg.to_flat().unwrap();
        assert_eq!(RunConfig::from_flat(&flat).unwrap(), cfg);
    }
}
