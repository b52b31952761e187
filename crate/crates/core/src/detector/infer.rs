use serde::{Deserialize, Serialize};

use crate::geometry::{descending_order, nms, BBox};
use crate::probcore::sigmoid;
use crate::synthdata::SceneFeatures;

use super::forward::{dense_forward, extract_proposals, second_stage_forward, Proposal};
use super::{Detector, ScoringMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
    /// Index of the source proposal, or of the source cell for the
    /// first-stage-only detector.
    pub proposal: usize,
    /// Number of cascade stages averaged into the score.
    pub stages: usize,
}

/// The first `budget` proposals of a scene.
pub fn propose(model: &Detector, feats: &SceneFeatures, budget: usize) -> Vec<Proposal> {
    let c = &model.config;
    let dense = dense_forward(&model.params, feats);
    extract_proposals(&dense, budget, c.proposal_nms, c.pre_nms_top)
}

pub fn infer(model: &Detector, feats: &SceneFeatures) -> Vec<Detection> {
    infer_with_budget(model, feats, model.config.max_proposals)
}

/// Inference with the proposal budget overridden.
pub fn infer_with_budget(model: &Detector, feats: &SceneFeatures, budget: usize) -> Vec<Detection> {
    let c = &model.config;
    let mut candidates: Vec<Detection> = Vec::new();
    if model.params.shape.one_stage {
        let dense = dense_forward(&model.params, feats);
        let mut base = 0;
        for level in &dense.levels {
            for (cell, logits) in level.class_logits.iter().enumerate() {
                for (class, &z) in logits.iter().enumerate() {
                    let score = sigmoid(z);
                    if score > c.score_threshold {
                        let bbox = level.decoded(cell).clip(dense.width, dense.height);
                        if !bbox.is_degenerate() {
                            candidates.push(Detection { bbox, class, score, proposal: base + cell, stages: 0 });
                        }
                    }
                }
            }
            base += level.grid.len();
        }
        let scores: Vec<f64> = candidates.iter().map(|d| d.score).collect();
        let top = descending_order(&scores);
        candidates = top.into_iter().take(c.pre_nms_top).map(|i| candidates[i]).collect();
    } else {
        let proposals = propose(model, feats, budget);
        let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let stages = second_stage_forward(&model.params, feats, &model.pyramid, &boxes, model.flavor);
        let Some(last) = stages.last() else {
            return Vec::new();
        };
        let inv = 1.0 / stages.len() as f64;
        for (i, p) in proposals.iter().enumerate() {
            let num_classes = model.params.shape.num_classes;
            for class in 0..num_classes {
                let mean = stages.iter().map(|s| s.posteriors[i].probs[class]).sum::<f64>() * inv;
                let score = match model.scoring {
                    ScoringMode::Probabilistic => p.p_obj * mean,
                    ScoringMode::NonprobBaseline => mean,
                };
                if score > c.score_threshold {
                    candidates.push(Detection { bbox: last.refined[i], class, score, proposal: i, stages: stages.len() });
                }
            }
        }
    }
    per_class_nms(candidates, c.final_nms, c.max_detections)
}

fn per_class_nms(candidates: Vec<Detection>, threshold: f64, max_detections: usize) -> Vec<Detection> {
    let num_classes = candidates.iter().map(|d| d.class + 1).max().unwrap_or(0);
    let mut kept: Vec<Detection> = Vec::new();
    for class in 0..num_classes {
        let group: Vec<Detection> = candidates.iter().filter(|d| d.class == class).copied().collect();
        let scored: Vec<(BBox, f64)> = group.iter().map(|d| (d.bbox, d.score)).collect();
        kept.extend(nms(&scored, threshold).into_iter().map(|i| group[i]));
    }
    let scores: Vec<f64> = kept.iter().map(|d| d.score).collect();
    descending_order(&scores).into_iter().take(max_detections).map(|i| kept[i]).collect()
}
