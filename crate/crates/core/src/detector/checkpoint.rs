//! Model checkpoint file.
//!
//! JSON object with keys `version`, `tool_version`, `pyramid`,
//! `feature_length`, `num_classes`, `cascade_thresholds`, `one_stage`,
//! `detector`, `scoring`, `flavor`, `blocks` and `run_config`. Each entry of
//! `blocks` is `{name, rows, cols, data}` where `data` is the standard base64
//! encoding of the row-major weights as little-endian IEEE-754 doubles, so
//! every weight survives the round trip bit for bit.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::assignment::PyramidConfig;
use crate::error::{Error, Result};

use super::params::{Linear, ModelShape, ScorerParams};
use super::{Detector, DetectorConfig, LossFlavor, ScoringMode};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub tool_version: String,
    pub pyramid: PyramidConfig,
    pub feature_length: usize,
    pub num_classes: usize,
    pub cascade_thresholds: Vec<f64>,
    pub one_stage: bool,
    pub detector: DetectorConfig,
    pub scoring: ScoringMode,
    pub flavor: LossFlavor,
    pub blocks: Vec<CheckpointBlock>,
    /// Configuration that produced the model, stored verbatim.
    pub run_config: serde_json::Value,
}

fn encode(w: &[f64]) -> String {
    let bytes: Vec<u8> = w.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(name: &str, text: &str, len: usize) -> Result<Vec<f64>> {
    let bad = |detail: String| Error::Format { what: "checkpoint", detail };
    let bytes = STANDARD.decode(text).map_err(|e| bad(format!("block {name}: {e}")))?;
    if bytes.len() != len * 8 {
        return Err(bad(format!("block {name}: {} bytes for {len} weights", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Checkpoint {
    pub fn from_detector(model: &Detector, run_config: serde_json::Value) -> Self {
        let blocks = model
            .params
            .blocks()
            .into_iter()
            .map(|(name, l)| CheckpointBlock { name, rows: l.rows, cols: l.cols, data: encode(&l.w) })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            tool_version: crate::TOOL_VERSION.to_string(),
            pyramid: model.pyramid.clone(),
            feature_length: model.params.shape.feature_len,
            num_classes: model.params.shape.num_classes,
            cascade_thresholds: model.config.cascade_thresholds.clone(),
            one_stage: model.params.shape.one_stage,
            detector: model.config.clone(),
            scoring: model.scoring,
            flavor: model.flavor,
            blocks,
            run_config,
        }
    }

    pub fn to_detector(&self) -> Result<Detector> {
        let bad = |detail: String| Error::Format { what: "checkpoint", detail };
        if self.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", self.version)));
        }
        let shape = ModelShape {
            num_levels: self.pyramid.levels.len(),
            feature_len: self.feature_length,
            num_classes: self.num_classes,
            num_stages: if self.one_stage { 0 } else { self.cascade_thresholds.len() },
            one_stage: self.one_stage,
        };
        let mut params = ScorerParams::zeros(shape);
        let expected: Vec<(String, usize, usize)> =
            params.blocks().into_iter().map(|(n, l)| (n, l.rows, l.cols)).collect();
        if expected.len() != self.blocks.len() {
            return Err(bad(format!("expected {} blocks, found {}", expected.len(), self.blocks.len())));
        }
        for ((dst, (name, rows, cols)), block) in params.blocks_mut().into_iter().zip(expected).zip(&self.blocks) {
            if block.name != name || block.rows != rows || block.cols != cols {
                return Err(bad(format!(
                    "block {} ({}x{}) does not match expected {name} ({rows}x{cols})",
                    block.name, block.rows, block.cols
                )));
            }
            *dst = Linear { rows, cols, w: decode(&name, &block.data, rows * cols)? };
        }
        if !params.is_finite() {
            return Err(bad("non-finite weights".into()));
        }
        let mut config = self.detector.clone();
        config.cascade_thresholds = self.cascade_thresholds.clone();
        config.one_stage = self.one_stage;
        Ok(Detector { params, pyramid: self.pyramid.clone(), config, scoring: self.scoring, flavor: self.flavor })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
