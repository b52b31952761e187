//! The two-stage detector.
//!
//! Stage one is a per-level linear head over cell features producing a
//! class-agnostic objectness logit and four distance-to-boundary offsets.
//! Its top cells become proposals, which are pooled and classified by one or
//! more cascaded second-stage heads. Final scores multiply the first-stage
//! objectness with the conditional class posterior.

mod checkpoint;
mod forward;
mod infer;
mod loss;
mod params;

pub use checkpoint::{Checkpoint, CheckpointBlock, CHECKPOINT_VERSION};
pub use forward::{
    dense_forward, extract_proposals, refine_box, roi_features, second_stage_forward,
    stage_forward, DenseLevel, DenseOutput, Proposal, StageOutput,
};
pub use infer::{infer, infer_with_budget, propose, Detection};
pub use loss::{
    loss_with_inputs, prepare_inputs, total_loss, BoxTarget, FrozenInputs, LossBreakdown,
    LossConfig, StageInputs, TrainingScene,
};
pub use params::{prior_bias, Linear, ModelShape, ScorerParams, StageHead};

use serde::{Deserialize, Serialize};

use crate::assignment::PyramidConfig;
use crate::error::{Error, Result};
use crate::probcore::FocalParams;

/// How final detection scores are formed, and how second-stage background
/// terms are weighted during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Score = objectness × class posterior; background CE weighted by objectness.
    Probabilistic,
    /// Score = class posterior alone; unweighted background CE.
    NonprobBaseline,
}

/// Second-stage classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFlavor {
    /// Softmax cross-entropy over classes plus background.
    Softmax,
    /// Per-class sigmoid BCE on a sampled class subset.
    Federated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Positive IoU threshold of each cascade stage; one entry for a plain
    /// two-stage detector.
    pub cascade_thresholds: Vec<f64>,
    pub max_proposals: usize,
    pub pre_nms_top: usize,
    pub proposal_nms: f64,
    pub final_nms: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    /// Replace the second stage with a per-cell class head in stage one.
    pub one_stage: bool,
    pub focal: FocalParams,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            cascade_thresholds: vec![0.6, 0.7, 0.8],
            max_proposals: 256,
            pre_nms_top: 1000,
            proposal_nms: 0.7,
            final_nms: 0.5,
            score_threshold: 0.01,
            max_detections: 100,
            one_stage: false,
            focal: FocalParams::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.one_stage && self.cascade_thresholds.is_empty() {
            return Err(Error::Config("at least one cascade stage is required".into()));
        }
        if self.cascade_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("cascade thresholds must lie in [0, 1]".into()));
        }
        for (name, v) in [("proposal_nms", self.proposal_nms), ("final_nms", self.final_nms)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.max_proposals == 0 || self.pre_nms_top == 0 {
            return Err(Error::Config("proposal budgets must be positive".into()));
        }
        Ok(())
    }
}

/// A complete model: weights plus everything inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub params: ScorerParams,
    pub pyramid: PyramidConfig,
    pub config: DetectorConfig,
    pub scoring: ScoringMode,
    pub flavor: LossFlavor,
}
