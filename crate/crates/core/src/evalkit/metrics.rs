use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::geometry::{descending_order, iou, BBox};
use crate::synthdata::{Scene, SceneDataset};

/// Greedy matching of one scene's detections of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Per detection, in input order.
    pub true_positive: Vec<bool>,
    pub matched_gt: Vec<Option<usize>>,
    /// Per ground truth.
    pub gt_matched: Vec<bool>,
}

/// Visits detections by descending score (ties by lower index); each takes
/// the unmatched ground truth of highest IoU, if that IoU reaches
/// `iou_threshold`. IoU ties go to the lower ground-truth index.
pub fn match_detections(detections: &[(BBox, f64)], gts: &[BBox], iou_threshold: f64) -> MatchResult {
    let scores: Vec<f64> = detections.iter().map(|d| d.1).collect();
    let mut out = MatchResult {
        true_positive: vec![false; detections.len()],
        matched_gt: vec![None; detections.len()],
        gt_matched: vec![false; gts.len()],
    };
    for i in descending_order(&scores) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if out.gt_matched[g] {
                continue;
            }
            let v = iou(&detections[i].0, gt);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            out.gt_matched[g] = true;
            out.true_positive[i] = true;
            out.matched_gt[i] = Some(g);
        }
    }
    out
}

/// All-point interpolated AP from scored TP flags.
///
/// Detections with equal scores enter the precision/recall curve together,
/// so their relative order does not matter. Returns `None` when there is
/// no ground truth.
pub fn ap_from_flags(scored: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let scores: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let order = descending_order(&scores);
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        seen += 1;
        tp += scored[i].1 as usize;
        let group_ends = order.get(k + 1).is_none_or(|&j| scored[j].0 != scored[i].0);
        if group_ends {
            points.push((tp as f64 / num_gt as f64, tp as f64 / seen as f64));
        }
    }
    // precision envelope from the right, then sum over recall steps
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut prev_recall = points.last().map_or(0.0, |p| p.0);
    for &(r, p) in points.iter().rev() {
        ap += (prev_recall - r) * envelope;
        envelope = envelope.max(p);
        prev_recall = r;
    }
    ap += prev_recall * envelope;
    Some(ap)
}

/// AP of one scene's detections against its ground truth.
pub fn average_precision(detections: &[(BBox, f64)], gts: &[BBox], iou_threshold: f64) -> Option<f64> {
    let m = match_detections(detections, gts, iou_threshold);
    let scored: Vec<(f64, bool)> = detections.iter().zip(&m.true_positive).map(|(d, &t)| (d.1, t)).collect();
    ap_from_flags(&scored, gts.len())
}

/// Per-class, per-threshold AP over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// `per_class[c][t]`; `None` for classes without ground truth.
    pub per_class: Vec<Option<Vec<f64>>>,
    /// Mean over evaluated classes then thresholds.
    pub map: f64,
}

impl MapReport {
    /// AP of class `c` averaged over thresholds.
    pub fn class_ap(&self, c: usize) -> Option<f64> {
        self.per_class[c].as_ref().map(|v| v.iter().sum::<f64>() / v.len().max(1) as f64)
    }

    /// Mean AP over the evaluable classes of `classes`; 0 when none is.
    pub fn map_over(&self, classes: &[usize]) -> f64 {
        let aps: Vec<f64> = classes.iter().filter_map(|&c| self.class_ap(c)).collect();
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    }
}

fn scene_class_boxes(scene: &Scene, class: usize) -> Vec<BBox> {
    scene.objects.iter().filter(|o| o.class == class).map(|o| o.bbox).collect()
}

/// COCO-style mAP. Class `c` is evaluated only on scenes whose annotation
/// covers `c`; detections in other scenes are ignored.
pub fn mean_ap(detections: &[Vec<Detection>], dataset: &SceneDataset, thresholds: &[f64]) -> MapReport {
    let num_classes = dataset.num_classes();
    let mut per_class = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut num_gt = 0;
        // per scene: (scores, per-threshold TP flags)
        let mut scored: Vec<Vec<(f64, bool)>> = vec![Vec::new(); thresholds.len()];
        for (scene, dets) in dataset.scenes.iter().zip(detections) {
            if !scene.is_annotated(class) {
                continue;
            }
            let gts = scene_class_boxes(scene, class);
            num_gt += gts.len();
            let mine: Vec<(BBox, f64)> = dets.iter().filter(|d| d.class == class).map(|d| (d.bbox, d.score)).collect();
            for (t, &thr) in thresholds.iter().enumerate() {
                let m = match_detections(&mine, &gts, thr);
                scored[t].extend(mine.iter().zip(&m.true_positive).map(|(d, &tp)| (d.1, tp)));
            }
        }
        per_class.push(if num_gt == 0 {
            None
        } else {
            Some(scored.iter().map(|s| ap_from_flags(s, num_gt).unwrap_or(0.0)).collect())
        });
    }
    let evaluated: Vec<&Vec<f64>> = per_class.iter().flatten().collect();
    let map = if evaluated.is_empty() || thresholds.is_empty() {
        0.0
    } else {
        let per_threshold = (0..thresholds.len())
            .map(|t| evaluated.iter().map(|v| v[t]).sum::<f64>() / evaluated.len() as f64);
        per_threshold.sum::<f64>() / thresholds.len() as f64
    };
    MapReport { thresholds: thresholds.to_vec(), per_class, map }
}

/// Fraction of ground-truth boxes covered at `iou_threshold` by one of the
/// first `budget` proposals of their scene. A dataset without objects has
/// recall 1.
pub fn proposal_recall(proposals: &[Vec<BBox>], scenes: &[Scene], iou_threshold: f64, budget: usize) -> f64 {
    let mut total = 0usize;
    let mut covered = 0usize;
    for (props, scene) in proposals.iter().zip(scenes) {
        let top = &props[..budget.min(props.len())];
        for o in &scene.objects {
            total += 1;
            if top.iter().any(|p| iou(p, &o.bbox) >= iou_threshold) {
                covered += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        covered as f64 / total as f64
    }
}

/// Bottom frequency tercile: the `ceil(C / 3)` least frequent classes,
/// ties broken by class id.
pub fn rare_classes(frequencies: &[usize]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..frequencies.len()).collect();
    ids.sort_by_key(|&c| (frequencies[c], c));
    ids.truncate(frequencies.len().div_ceil(3));
    ids.sort_unstable();
    ids
}
