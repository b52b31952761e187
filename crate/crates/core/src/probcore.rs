//! The two-stage probability model: score fusion, the positive objective,
//! the two background lower bounds with their gap analysis, and focal loss.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::Result;

/// Floor applied to every probability before a logarithm.
pub const PROB_EPS: f64 = 1e-12;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// First-stage state of a candidate: `P(O = 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectnessState {
    pub p_obj: f64,
}

impl ObjectnessState {
    pub fn new(p_obj: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&p_obj));
        Self { p_obj }
    }

    /// `P(O = 0)`.
    pub fn alpha(&self) -> f64 {
        1.0 - self.p_obj
    }
}

/// Conditional class distribution `P(C | O = 1)` over the foreground classes
/// followed by background in the last slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosterior {
    pub probs: Vec<f64>,
}

impl ClassPosterior {
    pub fn new(probs: Vec<f64>) -> Self {
        debug_assert!(!probs.is_empty());
        Self { probs }
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        Self { probs: softmax(logits) }
    }

    /// Independent per-class sigmoids. The background slot holds
    /// `prod_c (1 - p_c)` clipped to `[eps, 1]`; the background logit itself
    /// is not used.
    pub fn from_sigmoid_logits(logits: &[f64]) -> Self {
        let n = logits.len() - 1;
        let mut probs: Vec<f64> = logits[..n].iter().map(|&z| sigmoid(z)).collect();
        let bg = probs.iter().map(|p| 1.0 - p).product::<f64>();
        probs.push(bg.clamp(PROB_EPS, 1.0));
        Self { probs }
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len() - 1
    }

    /// `P(bg | O = 1)`.
    pub fn beta(&self) -> f64 {
        *self.probs.last().expect("posterior has a background slot")
    }

    pub fn foreground(&self) -> &[f64] {
        &self.probs[..self.probs.len() - 1]
    }
}

/// Final class distribution of a candidate after combining both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedScore {
    pub scores: Vec<f64>,
    pub background: f64,
}

/// `P(C = c) = P(c | O = 1) P(O = 1)` for foreground classes, and
/// `P(bg) = P(bg | O = 1) P(O = 1) + P(O = 0)` since a first-stage negative
/// is always background.
pub fn fuse(obj: ObjectnessState, cls: &ClassPosterior) -> FusedScore {
    FusedScore {
        scores: cls.foreground().iter().map(|p| p * obj.p_obj).collect(),
        background: cls.beta() * obj.p_obj + obj.alpha(),
    }
}

/// Log-likelihood of an annotated object of class `class_id`:
/// `log P(c | O = 1) + log P(O = 1)`.
///
/// Returns `(value, d/dp_obj, d/dprobs[class_id])`.
pub fn positive_log_objective(
    obj: ObjectnessState,
    cls: &ClassPosterior,
    class_id: usize,
) -> (f64, f64, f64) {
    let p = clamp_prob(obj.p_obj);
    let q = clamp_prob(cls.probs[class_id]);
    (q.ln() + p.ln(), 1.0 / p, 1.0 / q)
}

/// Softmax cross-entropy `-weight * log softmax(logits)[target]` and its
/// gradient with respect to `logits`. With `target` the background slot and
/// `weight = p_obj` this is the objectness-weighted background term.
pub fn weighted_softmax_ce(logits: &[f64], target: usize, weight: f64) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let mut grad: Vec<f64> = p.iter().map(|v| weight * v).collect();
    grad[target] -= weight;
    (-weight * clamp_prob(p[target]).ln(), grad)
}

/// Exact background log-likelihood and its two lower bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundBounds {
    /// `log(beta (1 - alpha) + alpha)`
    pub exact: f64,
    /// `log alpha`
    pub b1: f64,
    /// `(1 - alpha) log beta`
    pub b2: f64,
}

impl BackgroundBounds {
    pub fn max_bound(&self) -> f64 {
        self.b1.max(self.b2)
    }

    pub fn gap(&self) -> f64 {
        self.exact - self.max_bound()
    }
}

/// `alpha = P(O = 0)`, `beta = P(bg | O = 1)`, both clamped to `[eps, 1]`.
pub fn background_bounds(alpha: f64, beta: f64) -> BackgroundBounds {
    let a = clamp_prob(alpha);
    let b = clamp_prob(beta);
    BackgroundBounds {
        exact: (b * (1.0 - a) + a).ln(),
        b1: a.ln(),
        b2: (1.0 - a) * b.ln(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub alpha: f64,
    pub beta: f64,
    pub exact: f64,
    pub b1: f64,
    pub b2: f64,
    pub gap: f64,
}

/// Bound gap evaluated on a regular grid, rows indexed by alpha.
#[derive(Debug, Clone)]
pub struct GapSurface {
    pub resolution: usize,
    pub eps: f64,
    pub points: Vec<GapPoint>,
    pub max_gap: f64,
    pub argmax: (f64, f64),
    pub min_gap: f64,
}

fn grid_value(i: usize, resolution: usize, eps: f64) -> f64 {
    if i + 1 == resolution {
        1.0
    } else {
        eps + (1.0 - eps) * i as f64 / (resolution - 1) as f64
    }
}

/// Sweeps `gap(alpha, beta) = exact - max(B1, B2)` over `[eps, 1]^2`.
pub fn bound_gap_sweep(grid_resolution: usize, eps: f64) -> GapSurface {
    assert!(grid_resolution >= 2, "grid resolution must be at least 2");
    let n = grid_resolution;
    let mut points = Vec::with_capacity(n * n);
    let mut max_gap = f64::NEG_INFINITY;
    let mut min_gap = f64::INFINITY;
    let mut argmax = (eps, eps);
    for i in 0..n {
        let alpha = grid_value(i, n, eps);
        for j in 0..n {
            let beta = grid_value(j, n, eps);
            let b = background_bounds(alpha, beta);
            let gap = b.gap();
            if gap > max_gap {
                max_gap = gap;
                argmax = (alpha, beta);
            }
            min_gap = min_gap.min(gap);
            points.push(GapPoint { alpha, beta, exact: b.exact, b1: b.b1, b2: b.b2, gap });
        }
    }
    GapSurface { resolution: n, eps, points, max_gap, argmax, min_gap }
}

impl GapSurface {
    /// Row-major CSV with columns `alpha,beta,exact,B1,B2,gap`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["alpha", "beta", "exact", "B1", "B2", "gap"])?;
        for p in &self.points {
            w.write_record(&[
                p.alpha.to_string(),
                p.beta.to_string(),
                p.exact.to_string(),
                p.b1.to_string(),
                p.b2.to_string(),
                p.gap.to_string(),
            ])?;
        }
        w.flush().map_err(|e| crate::error::Error::io("<csv>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25 }
    }
}

/// Focal loss on a probability and its derivative with respect to `p`.
///
/// positive: `-alpha (1-p)^gamma log p`; negative: `-(1-alpha) p^gamma log(1-p)`.
pub fn focal_loss(p: f64, positive: bool, params: FocalParams) -> (f64, f64) {
    let FocalParams { gamma, alpha } = params;
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if positive {
        let q = 1.0 - p;
        let log_p = p.ln();
        let loss = -alpha * q.powf(gamma) * log_p;
        let mut grad = -alpha * q.powf(gamma) / p;
        if gamma != 0.0 {
            grad += alpha * gamma * q.powf(gamma - 1.0) * log_p;
        }
        (loss, grad)
    } else {
        let q = 1.0 - p;
        let log_q = q.ln();
        let loss = -(1.0 - alpha) * p.powf(gamma) * log_q;
        let mut grad = (1.0 - alpha) * p.powf(gamma) / q;
        if gamma != 0.0 {
            grad -= (1.0 - alpha) * gamma * p.powf(gamma - 1.0) * log_q;
        }
        (loss, grad)
    }
}

/// Focal loss on a logit, returning `(loss, d loss / d logit, probability)`.
pub fn focal_loss_logit(z: f64, positive: bool, params: FocalParams) -> (f64, f64, f64) {
    let p = sigmoid(z);
    let (loss, dp) = focal_loss(p, positive, params);
    (loss, dp * p * (1.0 - p), p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn fuse_examples() {
        let cls = ClassPosterior::new(vec![0.6, 0.1, 0.3]);
        assert!((fuse(ObjectnessState::new(1.0), &cls).scores[0] - 0.6).abs() < 1e-15);
        assert!((fuse(ObjectnessState::new(0.5), &cls).scores[0] - 0.3).abs() < 1e-15);
        let cls = ClassPosterior::new(vec![0.3, 0.2, 0.5]);
        let f = fuse(ObjectnessState::new(0.6), &cls);
        assert!((f.background - 0.7).abs() < 1e-15);
        let total: f64 = f.scores.iter().sum::<f64>() + f.background;
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn positive_objective_examples() {
        let one = ClassPosterior::new(vec![1.0, 0.0]);
        assert_eq!(positive_log_objective(ObjectnessState::new(1.0), &one, 0).0, 0.0);
        let half = ClassPosterior::new(vec![0.5, 0.5]);
        let (v, dp, dq) = positive_log_objective(ObjectnessState::new(0.5), &half, 0);
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!((v + 1.386294).abs() < 1e-6);
        assert_eq!(dq, 2.0);
        assert_eq!(dp, 2.0);
        let (_, dp, _) = positive_log_objective(ObjectnessState::new(0.25), &half, 0);
        assert_eq!(dp, 4.0);
    }

    #[test]
    fn positive_objective_gradient_matches_finite_differences() {
        let h = 1e-6;
        for &(p, q) in &[(0.3, 0.7), (0.9, 0.05), (0.01, 0.5)] {
            let cls = |q: f64| ClassPosterior::new(vec![q, 1.0 - q]);
            let (_, dp, dq) = positive_log_objective(ObjectnessState::new(p), &cls(q), 0);
            let f = |p: f64, q: f64| positive_log_objective(ObjectnessState::new(p), &cls(q), 0).0;
            let np = (f(p + h, q) - f(p - h, q)) / (2.0 * h);
            let nq = (f(p, q + h) - f(p, q - h)) / (2.0 * h);
            assert!((dp - np).abs() / dp.abs() < 1e-5);
            assert!((dq - nq).abs() / dq.abs() < 1e-5);
        }
    }

    #[test]
    fn bound_examples() {
        let b = background_bounds(1.0, 0.3);
        assert_eq!(b.exact, 0.0);
        assert_eq!(b.b1, 0.0);
        let b = background_bounds(0.4, 1.0);
        assert!(b.exact.abs() < 1e-15);
        assert!(b.b2.abs() < 1e-15);
        let b = background_bounds(0.5, 0.5);
        assert!((b.exact - 0.75f64.ln()).abs() < 1e-15);
        assert!((b.exact + 0.287682).abs() < 1e-6);
        assert!((b.b1 + 0.693147).abs() < 1e-6);
        assert!((b.b2 + 0.346574).abs() < 1e-6);
        assert!((b.gap() - 0.058892).abs() < 1e-6);
    }

    #[test]
    fn gap_near_zero_corner_approaches_ln2() {
        let b = background_bounds(1e-6, 1e-6);
        assert!((b.gap() - LN2).abs() < 1e-3);
        for beta in [1e-6, 0.2, 0.7, 1.0] {
            assert!(background_bounds(1.0, beta).gap().abs() < 1e-15);
        }
    }

    #[test]
    fn small_sweep_shape() {
        let s = bound_gap_sweep(3, 1e-6);
        assert_eq!(s.points.len(), 9);
        assert_eq!(s.points[0].alpha, 1e-6);
        assert_eq!(s.points[8].alpha, 1.0);
        assert_eq!(s.points[1].alpha, 1e-6);
        assert_eq!(s.argmax, (1e-6, 1e-6));
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("alpha,beta,exact,B1,B2,gap\n"));
        assert_eq!(text.lines().count(), 10);
    }

    #[test]
    fn focal_examples() {
        let p = FocalParams { gamma: 0.0, alpha: 0.5 };
        assert!((focal_loss(0.5, true, p).0 - 0.346574).abs() < 1e-6);
        assert!(focal_loss(1.0, true, FocalParams::default()).0 < 1e-20);
        let (l, _) = focal_loss(0.9, true, FocalParams { gamma: 2.0, alpha: 0.25 });
        let expected = 0.25 * 0.01 * -(0.9f64.ln());
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 2.634e-4).abs() < 1e-7);
    }

    #[test]
    fn softmax_sums_to_one_and_sigmoid_is_stable() {
        let s = softmax(&[1000.0, 0.0, -1000.0]);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((softplus(0.0) - LN2).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_posterior_background_is_product() {
        let post = ClassPosterior::from_sigmoid_logits(&[0.0, 0.0, 5.0]);
        assert!((post.beta() - 0.25).abs() < 1e-15);
        assert_eq!(post.num_classes(), 2);
    }

    proptest! {
        #[test]
        fn bounds_are_valid_and_within_ln2(alpha in 1e-9..1.0f64, beta in 1e-9..1.0f64) {
            let b = background_bounds(alpha, beta);
            prop_assert!(b.exact >= b.b1 - 1e-12);
            prop_assert!(b.exact >= b.b2 - 1e-12);
            prop_assert!(b.gap() <= LN2 + 1e-9);
        }

        #[test]
        fn fuse_preserves_foreground_argmax(p in 1e-6..1.0f64, raw in proptest::collection::vec(0.0..1.0f64, 2..8)) {
            let cls = ClassPosterior::new(raw.clone());
            let f = fuse(ObjectnessState::new(p), &cls);
            let am = |v: &[f64]| crate::geometry::descending_order(v)[0];
            prop_assert_eq!(am(cls.foreground()), am(&f.scores));
        }

        #[test]
        fn focal_gradient_matches_finite_differences(
            p in 0.01..0.99f64, positive: bool, gamma in 0.0..3.0f64, alpha in 0.05..0.95f64
        ) {
            let params = FocalParams { gamma, alpha };
            let (_, g) = focal_loss(p, positive, params);
            let h = 1e-6;
            let num = (focal_loss(p + h, positive, params).0 - focal_loss(p - h, positive, params).0) / (2.0 * h);
            let denom = g.abs().max(num.abs()).max(1e-4);
            prop_assert!((g - num).abs() / denom < 1e-5, "analytic {} numeric {}", g, num);
        }

        #[test]
        fn focal_logit_gradient_matches_finite_differences(z in -6.0..6.0f64, positive: bool) {
            let params = FocalParams::default();
            let (_, g, _) = focal_loss_logit(z, positive, params);
            let h = 1e-6;
            let num = (focal_loss_logit(z + h, positive, params).0 - focal_loss_logit(z - h, positive, params).0) / (2.0 * h);
            let denom = g.abs().max(num.abs()).max(1e-4);
            prop_assert!((g - num).abs() / denom < 1e-5);
        }
    }
}
