//! The run configuration shared by the library experiments and the CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assignment::PyramidConfig;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::fedloss::FedLossConfig;
use crate::synthdata::GenConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// IoU at which a proposal covers a ground-truth box.
    pub ar_iou: f64,
    pub proposal_budgets: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|k| 0.5 + 0.05 * k as f64).collect(),
            ar_iou: 0.5,
            proposal_budgets: vec![256, 128, 64, 32, 16, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of the dataset written by `gen-data`.
    pub data_seed: u64,
    /// Per-run seeds; each drives its own train split, test split and
    /// batch order.
    pub seeds: Vec<u64>,
    pub test_scenes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { data_seed: 1, seeds: vec![0, 1, 2, 3, 4], test_scenes: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: GenConfig,
    pub pyramid: PyramidConfig,
    pub detector: DetectorConfig,
    pub trainer: TrainConfig,
    pub fedloss: FedLossConfig,
    pub eval: EvalConfig,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.pyramid.validate()?;
        self.detector.validate()?;
        self.trainer.validate()?;
        if self.fedloss.subset_size == 0 {
            return Err(Error::Config("fedloss.subset_size must be positive".into()));
        }
        if self.eval.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("eval.iou_thresholds must lie in [0, 1]".into()));
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    /// Parses a config document. Accepts a bare run config or any artifact
    /// carrying one under `run_config`.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let inner = match value.get("run_config") {
            Some(v) if !v.is_null() => v.clone(),
            _ => value,
        };
        let config: RunConfig =
            serde_json::from_value(inner).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
        assert_eq!(c.eval.iou_thresholds.len(), 10);
        assert!((c.eval.iou_thresholds[9] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"trainer": {"iters": 3}}"#), Err(Error::Config(_))));
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn partial_and_embedded_configs() {
        let c = RunConfig::from_json(r#"{"trainer": {"iterations": 7}}"#).unwrap();
        assert_eq!(c.trainer.iterations, 7);
        assert_eq!(c.trainer.batch_size, 8);
        let wrapped = serde_json::json!({"version": 1, "run_config": c.to_value()}).to_string();
        assert_eq!(RunConfig::from_json(&wrapped).unwrap(), c);
    }
}
