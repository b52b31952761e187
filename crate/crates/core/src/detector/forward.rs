use crate::assignment::{LevelGrid, PyramidConfig};
use crate::geometry::{decode_ltrb, descending_order, nms_limited, BBox, LtrbOffsets};
use crate::probcore::{sigmoid, softplus, ClassPosterior};
use crate::synthdata::SceneFeatures;

use super::params::{ScorerParams, StageHead};
use super::LossFlavor;

/// Dense first-stage outputs on one level, indexed by cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLevel {
    pub grid: LevelGrid,
    pub obj_logit: Vec<f64>,
    pub objectness: Vec<f64>,
    /// Pre-activation of the four offsets.
    pub raw: Vec<[f64; 4]>,
    /// `stride * softplus(raw)`.
    pub offsets: Vec<LtrbOffsets>,
    /// Per-cell class logits of the first-stage-only detector, else empty.
    pub class_logits: Vec<Vec<f64>>,
}

impl DenseLevel {
    pub fn decoded(&self, cell: usize) -> BBox {
        decode_ltrb(self.grid.center_of(cell), &self.offsets[cell])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseOutput {
    pub width: f64,
    pub height: f64,
    pub levels: Vec<DenseLevel>,
}

pub fn dense_forward(params: &ScorerParams, feats: &SceneFeatures) -> DenseOutput {
    let levels = feats
        .levels
        .iter()
        .zip(&params.first_stage)
        .enumerate()
        .map(|(l, (lf, head))| {
            let n = lf.grid.len();
            let s = lf.grid.stride;
            let mut out = DenseLevel {
                grid: lf.grid,
                obj_logit: Vec::with_capacity(n),
                objectness: Vec::with_capacity(n),
                raw: Vec::with_capacity(n),
                offsets: Vec::with_capacity(n),
                class_logits: Vec::new(),
            };
            for idx in 0..n {
                let x = lf.cell(idx);
                let y = head.forward(x);
                out.obj_logit.push(y[0]);
                out.objectness.push(sigmoid(y[0]));
                let raw = [y[1], y[2], y[3], y[4]];
                out.offsets.push(LtrbOffsets::new(
                    s * softplus(raw[0]),
                    s * softplus(raw[1]),
                    s * softplus(raw[2]),
                    s * softplus(raw[3]),
                ));
                out.raw.push(raw);
                if let Some(cls) = params.class_head.get(l) {
                    out.class_logits.push(cls.forward(x));
                }
            }
            out
        })
        .collect();
    DenseOutput { width: feats.width, height: feats.height, levels }
}

/// A first-stage candidate handed to the second stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub p_obj: f64,
    pub level: usize,
    pub cell: usize,
}

/// Decodes every cell, keeps the `pre_nms_top` most confident across levels,
/// applies class-agnostic NMS and truncates to `max_proposals`. Boxes are
/// clipped to the scene; boxes with no area after clipping are dropped.
pub fn extract_proposals(
    dense: &DenseOutput,
    max_proposals: usize,
    nms_threshold: f64,
    pre_nms_top: usize,
) -> Vec<Proposal> {
    let mut all: Vec<(usize, usize)> = Vec::new();
    let mut scores: Vec<f64> = Vec::new();
    for (l, level) in dense.levels.iter().enumerate() {
        for (cell, &p) in level.objectness.iter().enumerate() {
            all.push((l, cell));
            scores.push(p);
        }
    }
    let mut candidates: Vec<Proposal> = Vec::with_capacity(pre_nms_top);
    for i in descending_order(&scores) {
        if candidates.len() == pre_nms_top {
            break;
        }
        let (l, cell) = all[i];
        let bbox = dense.levels[l].decoded(cell).clip(dense.width, dense.height);
        if bbox.is_degenerate() {
            continue;
        }
        candidates.push(Proposal { bbox, p_obj: scores[i], level: l, cell });
    }
    let scored: Vec<(BBox, f64)> = candidates.iter().map(|p| (p.bbox, p.p_obj)).collect();
    nms_limited(&scored, nms_threshold, max_proposals)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

/// Mean cell feature over the cells of the box's size-matched level whose
/// centers lie in the box, followed by `ln(w/16)`, `ln(h/16)` and
/// `w / (w + h)`. A box covering no cell center uses the cell holding its
/// center.
pub fn roi_features(feats: &SceneFeatures, pyramid: &PyramidConfig, bbox: &BBox) -> Vec<f64> {
    let level = pyramid
        .level_for_extent(bbox.max_extent())
        .unwrap_or(pyramid.levels.len() - 1);
    let lf = &feats.levels[level];
    let g = lf.grid;
    let s = g.stride;
    let first = |lo: f64, n: usize| ((lo / s - 0.5).ceil().max(0.0) as usize).min(n);
    let last = |hi: f64, n: usize| {
        let v = (hi / s - 0.5).floor();
        if v < 0.0 {
            None
        } else {
            Some((v as usize).min(n - 1))
        }
    };
    let mut out = vec![0.0; lf.feature_len + 3];
    let mut count = 0usize;
    if let (Some(r1), Some(c1)) = (last(bbox.y2, g.rows), last(bbox.x2, g.cols)) {
        let (r0, c0) = (first(bbox.y1, g.rows), first(bbox.x1, g.cols));
        for r in r0..=r1 {
            for c in c0..=c1 {
                for (slot, v) in out.iter_mut().zip(lf.cell(g.index(r, c))) {
                    *slot += v;
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        let (r, c) = g.cell_at(bbox.center());
        out[..lf.feature_len].copy_from_slice(lf.cell(g.index(r, c)));
    } else {
        let inv = 1.0 / count as f64;
        out[..lf.feature_len].iter_mut().for_each(|v| *v *= inv);
    }
    let (w, h) = (bbox.width().max(1e-6), bbox.height().max(1e-6));
    let n = lf.feature_len;
    out[n] = (w / 16.0).ln();
    out[n + 1] = (h / 16.0).ln();
    out[n + 2] = w / (w + h);
    out
}

/// Grows each side by its delta times the box size.
pub fn refine_box(b: &BBox, deltas: &[f64; 4]) -> BBox {
    let (w, h) = (b.width(), b.height());
    BBox::new(
        b.x1 - deltas[0] * w,
        b.y1 - deltas[1] * h,
        b.x2 + deltas[2] * w,
        b.y2 + deltas[3] * h,
    )
}

/// Outputs of one cascade stage for its input boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub boxes: Vec<BBox>,
    pub pooled: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub posteriors: Vec<ClassPosterior>,
    pub deltas: Vec<[f64; 4]>,
    /// Refined boxes, normalized and clipped; the input box when refinement
    /// collapses to zero area.
    pub refined: Vec<BBox>,
}

pub fn stage_forward(
    head: &StageHead,
    feats: &SceneFeatures,
    pyramid: &PyramidConfig,
    boxes: &[BBox],
    flavor: LossFlavor,
) -> StageOutput {
    let n = boxes.len();
    let mut out = StageOutput {
        boxes: boxes.to_vec(),
        pooled: Vec::with_capacity(n),
        logits: Vec::with_capacity(n),
        posteriors: Vec::with_capacity(n),
        deltas: Vec::with_capacity(n),
        refined: Vec::with_capacity(n),
    };
    for b in boxes {
        let x = roi_features(feats, pyramid, b);
        let z = head.cls.forward(&x);
        let d = head.bbox.forward(&x);
        let deltas = [d[0], d[1], d[2], d[3]];
        let refined = refine_box(b, &deltas).normalized().clip(feats.width, feats.height);
        out.posteriors.push(match flavor {
            LossFlavor::Softmax => ClassPosterior::from_logits(&z),
            LossFlavor::Federated => ClassPosterior::from_sigmoid_logits(&z),
        });
        out.refined.push(if refined.is_degenerate() { *b } else { refined });
        out.pooled.push(x);
        out.logits.push(z);
        out.deltas.push(deltas);
    }
    out
}

/// Runs the cascade: stage `t` classifies and refines the boxes refined by
/// stage `t - 1`.
pub fn second_stage_forward(
    params: &ScorerParams,
    feats: &SceneFeatures,
    pyramid: &PyramidConfig,
    boxes: &[BBox],
    flavor: LossFlavor,
) -> Vec<StageOutput> {
    let mut outputs: Vec<StageOutput> = Vec::with_capacity(params.stages.len());
    for head in &params.stages {
        let input = outputs.last().map_or_else(|| boxes.to_vec(), |o| o.refined.clone());
        outputs.push(stage_forward(head, feats, pyramid, &input, flavor));
    }
    outputs
}
