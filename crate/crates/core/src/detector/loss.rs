use crate::assignment::{assign, Assignment, AssignmentMode, CellState, PyramidConfig};
use crate::error::{Error, Result};
use crate::fedloss::federated_bce;
use crate::geometry::{giou_loss, giou_loss_boxes, iou, BBox, LtrbOffsets};
use crate::probcore::{focal_loss_logit, sigmoid, weighted_softmax_ce};
use crate::synthdata::{Scene, SceneFeatures};

use super::forward::{dense_forward, extract_proposals, refine_box, stage_forward};
use super::params::ScorerParams;
use super::{DetectorConfig, LossFlavor, ScoringMode};

/// One scene prepared for training: features, ground truth and dense labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingScene {
    pub features: SceneFeatures,
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
    pub labels: Assignment,
}

impl TrainingScene {
    pub fn new(
        scene: &Scene,
        features: SceneFeatures,
        pyramid: &PyramidConfig,
        mode: AssignmentMode,
    ) -> Result<Self> {
        let boxes = scene.boxes();
        let labels = assign(mode, &boxes, pyramid, scene.width(), scene.height())?;
        let classes = scene.objects.iter().map(|o| o.class).collect();
        Ok(Self { features, boxes, classes, labels })
    }

    /// Distinct ground-truth classes, ascending.
    pub fn positive_classes(&self) -> Vec<usize> {
        let mut c = self.classes.clone();
        c.sort_unstable();
        c.dedup();
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub detector: DetectorConfig,
    pub first_stage_weight: f64,
    pub scoring: ScoringMode,
    pub flavor: LossFlavor,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            first_stage_weight: 0.5,
            scoring: ScoringMode::Probabilistic,
            flavor: LossFlavor::Softmax,
        }
    }
}

/// Ground truth matched to a second-stage input box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxTarget {
    pub class: usize,
    pub bbox: BBox,
}

/// Parameter-independent inputs of one cascade stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageInputs {
    pub boxes: Vec<BBox>,
    pub pooled: Vec<Vec<f64>>,
    /// Background weight of each box: its objectness, or 1 in baseline mode.
    pub weights: Vec<f64>,
    /// `None` marks background.
    pub targets: Vec<Option<BoxTarget>>,
}

/// Everything the loss treats as constant: second-stage input boxes, their
/// objectness weights and labels, and the federated class subset.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenInputs {
    pub stages: Vec<StageInputs>,
    pub subset: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub stage1_focal: f64,
    pub stage1_giou: f64,
    pub stage2_cls: f64,
    pub stage2_bg_weighted: f64,
    pub stage2_giou: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("total", self.total),
            ("stage1_focal", self.stage1_focal),
            ("stage1_giou", self.stage1_giou),
            ("stage2_cls", self.stage2_cls),
            ("stage2_bg_weighted", self.stage2_bg_weighted),
            ("stage2_giou", self.stage2_giou),
        ]
    }

    /// Weighted terms summing to `total`.
    pub fn parts(&self, first_stage_weight: f64) -> [f64; 5] {
        [
            first_stage_weight * self.stage1_focal,
            first_stage_weight * self.stage1_giou,
            self.stage2_cls,
            self.stage2_bg_weighted,
            self.stage2_giou,
        ]
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.stage1_focal += other.stage1_focal;
        self.stage1_giou += other.stage1_giou;
        self.stage2_cls += other.stage2_cls;
        self.stage2_bg_weighted += other.stage2_bg_weighted;
        self.stage2_giou += other.stage2_giou;
    }

    pub fn scaled(&self, f: f64) -> LossBreakdown {
        LossBreakdown {
            total: self.total * f,
            stage1_focal: self.stage1_focal * f,
            stage1_giou: self.stage1_giou * f,
            stage2_cls: self.stage2_cls * f,
            stage2_bg_weighted: self.stage2_bg_weighted * f,
            stage2_giou: self.stage2_giou * f,
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        self.terms()[1..].iter().chain(&self.terms()[..1]).find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

fn label_boxes(boxes: &[BBox], scene: &TrainingScene, threshold: f64) -> Vec<Option<BoxTarget>> {
    boxes
        .iter()
        .map(|b| {
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in scene.boxes.iter().enumerate() {
                let v = iou(b, g);
                if v >= threshold && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((k, v));
                }
            }
            best.map(|(k, _)| BoxTarget { class: scene.classes[k], bbox: scene.boxes[k] })
        })
        .collect()
}

/// Builds the frozen second-stage inputs under the current parameters.
///
/// Stage one proposals are extracted and the ground-truth boxes appended with
/// objectness 1. Stage `t > 0` takes the boxes refined by stage `t - 1`.
/// Every box is labeled by its best-overlapping object at the stage's IoU
/// threshold.
pub fn prepare_inputs(
    params: &ScorerParams,
    scene: &TrainingScene,
    pyramid: &PyramidConfig,
    config: &LossConfig,
    subset: Option<Vec<usize>>,
) -> FrozenInputs {
    if params.stages.is_empty() {
        return FrozenInputs { stages: Vec::new(), subset };
    }
    let det = &config.detector;
    let dense = dense_forward(params, &scene.features);
    let proposals = extract_proposals(&dense, det.max_proposals, det.proposal_nms, det.pre_nms_top);
    let mut boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let mut p_obj: Vec<f64> = proposals.iter().map(|p| p.p_obj).collect();
    boxes.extend(scene.boxes.iter().copied());
    p_obj.extend(std::iter::repeat_n(1.0, scene.boxes.len()));
    let weights = match config.scoring {
        ScoringMode::Probabilistic => p_obj,
        ScoringMode::NonprobBaseline => vec![1.0; boxes.len()],
    };

    let mut stages = Vec::with_capacity(params.stages.len());
    for (t, head) in params.stages.iter().enumerate() {
        let threshold = det.cascade_thresholds.get(t).copied().unwrap_or(0.5);
        let out = stage_forward(head, &scene.features, pyramid, &boxes, config.flavor);
        stages.push(StageInputs {
            targets: label_boxes(&boxes, scene, threshold),
            boxes: std::mem::take(&mut boxes),
            pooled: out.pooled,
            weights: weights.clone(),
        });
        boxes = out.refined;
    }
    FrozenInputs { stages, subset }
}

/// Loss and gradient with every stop-gradient quantity held at `inputs`.
pub fn loss_with_inputs(
    params: &ScorerParams,
    scene: &TrainingScene,
    config: &LossConfig,
    inputs: &FrozenInputs,
) -> Result<(LossBreakdown, ScorerParams)> {
    let mut grad = params.zeros_like();
    let mut out = LossBreakdown::default();
    let w1 = config.first_stage_weight;
    let focal = config.detector.focal;

    // stage one: dense focal loss plus gIoU on positive cells
    let num_pos = scene.labels.num_positive();
    let norm = 1.0 / num_pos.max(1) as f64;
    let (mut focal_sum, mut giou_sum) = (0.0, 0.0);
    for (l, level) in scene.labels.levels.iter().enumerate() {
        let feats = &scene.features.levels[l];
        let head = &params.first_stage[l];
        let cls_head = params.class_head.get(l);
        let stride = level.grid.stride;
        for (idx, label) in level.cells.iter().enumerate() {
            let object = match label.state {
                CellState::Ignore => continue,
                CellState::Negative => None,
                CellState::Positive { object } => Some(object),
            };
            let x = feats.cell(idx);
            let y = head.forward(x);
            let mut dy = [0.0; 5];
            let (fl, dz, _) = focal_loss_logit(y[0], object.is_some(), focal);
            focal_sum += fl;
            dy[0] = w1 * norm * dz;
            if let (Some(_), Some(target)) = (object, label.target) {
                let raw = [y[1], y[2], y[3], y[4]];
                let sp: Vec<f64> = raw.iter().map(|&r| stride * crate::probcore::softplus(r)).collect();
                let pred = LtrbOffsets::new(sp[0], sp[1], sp[2], sp[3]);
                let (gl, g) = giou_loss(&pred, &target, level.grid.center_of(idx))?;
                giou_sum += gl;
                for k in 0..4 {
                    dy[k + 1] = w1 * norm * g[k] * stride * sigmoid(raw[k]);
                }
            }
            grad.first_stage[l].accumulate(&dy, x);
            if let Some(ch) = cls_head {
                let z = ch.forward(x);
                let mut dzc = vec![0.0; z.len()];
                for (c, &zc) in z.iter().enumerate() {
                    let positive = object.is_some_and(|o| scene.classes[o] == c);
                    let (fl, dz, _) = focal_loss_logit(zc, positive, focal);
                    focal_sum += fl;
                    dzc[c] = w1 * norm * dz;
                }
                grad.class_head[l].accumulate(&dzc, x);
            }
        }
    }
    out.stage1_focal = focal_sum * norm;
    out.stage1_giou = giou_sum * norm;

    // second stage: classification, weighted background and refinement
    for (t, (head, si)) in params.stages.iter().zip(&inputs.stages).enumerate() {
        let n = si.boxes.len();
        if n == 0 {
            continue;
        }
        let n_pos = si.targets.iter().filter(|g| g.is_some()).count();
        let inv_pos = 1.0 / n_pos.max(1) as f64;
        let g_head = &mut grad.stages[t];
        for i in 0..n {
            let x = &si.pooled[i];
            let z = head.cls.forward(x);
            let target = si.targets[i];
            let bg_weight = si.weights[i];
            let (loss, mut dz) = match config.flavor {
                LossFlavor::Softmax => match target {
                    Some(g) => weighted_softmax_ce(&z, g.class, 1.0),
                    None => weighted_softmax_ce(&z, z.len() - 1, bg_weight),
                },
                LossFlavor::Federated => {
                    let subset = inputs.subset.as_deref().unwrap_or(&[]);
                    let w = if target.is_some() { 1.0 } else { bg_weight };
                    federated_bce(&z, target.map(|g| g.class), subset, w)?
                }
            };
            if target.is_some() {
                out.stage2_cls += loss * inv_pos;
            } else {
                out.stage2_bg_weighted += loss * inv_pos;
            }
            dz.iter_mut().for_each(|v| *v *= inv_pos);
            g_head.cls.accumulate(&dz, x);

            if let Some(g) = target {
                let b = si.boxes[i];
                let d = head.bbox.forward(x);
                let deltas = [d[0], d[1], d[2], d[3]];
                let pred = refine_box(&b, &deltas);
                let (gl, gc) = giou_loss_boxes(&pred, &g.bbox);
                out.stage2_giou += gl * inv_pos;
                let (w, h) = (b.width(), b.height());
                let dd = [-gc[0] * w * inv_pos, -gc[1] * h * inv_pos, gc[2] * w * inv_pos, gc[3] * h * inv_pos];
                g_head.bbox.accumulate(&dd, x);
            }
        }
    }
    out.total = w1 * (out.stage1_focal + out.stage1_giou)
        + out.stage2_cls
        + out.stage2_bg_weighted
        + out.stage2_giou;
    Ok((out, grad))
}

/// Prepares the frozen inputs under `params` and evaluates the loss.
pub fn total_loss(
    params: &ScorerParams,
    scene: &TrainingScene,
    pyramid: &PyramidConfig,
    config: &LossConfig,
    subset: Option<Vec<usize>>,
) -> Result<(LossBreakdown, ScorerParams)> {
    if config.flavor == LossFlavor::Federated && subset.is_none() && !params.stages.is_empty() {
        return Err(Error::Config("federated loss requires a class subset".into()));
    }
    let inputs = prepare_inputs(params, scene, pyramid, config, subset);
    loss_with_inputs(params, scene, config, &inputs)
}
