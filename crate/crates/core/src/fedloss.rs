//! Federated classification loss for sparsely annotated long-tail data.
//!
//! Every iteration picks a class subset `S` holding all positive classes
//! plus negatives drawn by square-root training frequency, and applies
//! per-class sigmoid binary cross-entropy on `S` only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probcore::{clamp_prob, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedLossConfig {
    pub subset_size: usize,
}

impl Default for FedLossConfig {
    fn default() -> Self {
        Self { subset_size: 50 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassFrequencyTable {
    counts: Vec<usize>,
    weights: Vec<f64>,
}

impl ClassFrequencyTable {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        let weights = sampling_weights(&counts)?;
        Ok(Self { counts, weights })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// `w_c = sqrt(n_c) / sum_j sqrt(n_j)`.
pub fn sampling_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let roots: Vec<f64> = counts.iter().map(|&n| (n as f64).sqrt()).collect();
    let total: f64 = roots.iter().sum();
    if total <= 0.0 {
        return Err(Error::NoPositiveCounts);
    }
    Ok(roots.into_iter().map(|r| r / total).collect())
}

/// Samples the class subset for one iteration.
///
/// Negatives are drawn without replacement in proportion to the table
/// weights using weighted reservoir keys `u^(1/w)`; zero-weight classes are
/// only taken once every weighted class is exhausted. The result is sorted.
pub fn sample_subset<R: Rng + ?Sized>(
    positives: &[usize],
    table: &ClassFrequencyTable,
    subset_size: usize,
    rng: &mut R,
) -> Vec<usize> {
    let n = table.num_classes();
    let mut in_set = vec![false; n];
    for &p in positives {
        in_set[p] = true;
    }
    let target = subset_size.max(1).min(n);
    let have = in_set.iter().filter(|&&b| b).count();
    if have < target {
        // one key per class in class order so the stream use is order-independent
        let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(n);
        for c in 0..n {
            let u: f64 = rng.random::<f64>();
            if in_set[c] {
                continue;
            }
            let w = table.weights[c];
            let key = if w > 0.0 { u.max(f64::MIN_POSITIVE).ln() / w } else { f64::NEG_INFINITY };
            keyed.push((key, c));
        }
        keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
        for &(_, c) in keyed.iter().take(target - have) {
            in_set[c] = true;
        }
    }
    (0..n).filter(|&c| in_set[c]).collect()
}

/// Sigmoid BCE over the classes of `subset`.
///
/// `logits` holds one logit per foreground class followed by the background
/// logit, which this loss never reads. `target` is the true class or `None`
/// for background. The whole term is scaled by `weight`; callers pass the
/// first-stage objectness for background proposals. The returned gradient
/// has the length of `logits` and is exactly zero outside `subset`.
pub fn federated_bce(
    logits: &[f64],
    target: Option<usize>,
    subset: &[usize],
    weight: f64,
) -> Result<(f64, Vec<f64>)> {
    if let Some(c) = target {
        if !subset.contains(&c) {
            return Err(Error::ClassOutsideSubset { class: c });
        }
    }
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for &c in subset {
        let z = logits[c];
        let p = sigmoid(z);
        let y = if target == Some(c) { 1.0 } else { 0.0 };
        loss -= weight * if y > 0.0 { clamp_prob(p).ln() } else { clamp_prob(1.0 - p).ln() };
        grad[c] = weight * (p - y);
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sqrt_weights() {
        let w = sampling_weights(&[100, 25, 4]).unwrap();
        let expected = [10.0 / 17.0, 5.0 / 17.0, 2.0 / 17.0];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(sampling_weights(&[7, 7, 7, 7]).unwrap(), vec![0.25; 4]);
        assert_eq!(sampling_weights(&[3]).unwrap(), vec![1.0]);
        assert_eq!(sampling_weights(&[5, 0]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(sampling_weights(&[0, 0]), Err(Error::NoPositiveCounts)));
    }

    #[test]
    fn subset_structure() {
        let table = ClassFrequencyTable::new(vec![10, 20, 30, 40]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_subset(&[0, 1, 2, 3], &table, 2, &mut rng), vec![0, 1, 2, 3]);
        for _ in 0..200 {
            let s = sample_subset(&[0], &table, 3, &mut rng);
            assert_eq!(s.len(), 3);
            assert!(s.contains(&0));
            assert!(s.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(sample_subset(&[], &table, 50, &mut rng), vec![0, 1, 2, 3]);
    }

    #[test]
    fn subset_resampled_per_call() {
        let table = ClassFrequencyTable::new(vec![1; 30]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = sample_subset(&[2], &table, 5, &mut rng);
        let b = sample_subset(&[2], &table, 5, &mut rng);
        assert_ne!(a, b);
    }

    #[test]
    fn zero_count_classes_only_fill_leftover_slots() {
        let table = ClassFrequencyTable::new(vec![4, 0, 9, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            assert_eq!(sample_subset(&[], &table, 2, &mut rng), vec![0, 2]);
        }
    }

    #[test]
    fn pick_frequencies_follow_weights() {
        let table = ClassFrequencyTable::new(vec![100, 25, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut hits = [0usize; 3];
        let draws = 100_000;
        for _ in 0..draws {
            hits[sample_subset(&[], &table, 1, &mut rng)[0]] += 1;
        }
        let l1: f64 = hits.iter().zip([10.0, 5.0, 2.0]).map(|(&h, w)| (h as f64 / draws as f64 - w / 17.0).abs()).sum();
        assert!(l1 < 0.02, "{hits:?}");
    }

    #[test]
    fn bce_examples() {
        let logits = vec![0.0; 51];
        let (l, g) = federated_bce(&logits, None, &[], 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let all: Vec<usize> = (0..50).collect();
        let (l, _) = federated_bce(&logits, None, &all, 1.0).unwrap();
        assert!((l - 50.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 34.657).abs() < 1e-3);
        assert!(federated_bce(&logits, Some(7), &[1, 2], 1.0).is_err());
    }

    #[test]
    fn bce_gradient_masked_and_correct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..9).map(|_| rng.random_range(-3.0..3.0)).collect();
            let subset = vec![1, 4, 6];
            let target = if rng.random::<bool>() { Some(4) } else { None };
            let w = rng.random_range(0.1..1.0);
            let (_, g) = federated_bce(&logits, target, &subset, w).unwrap();
            for c in 0..9 {
                let h = 1e-6;
                let mut up = logits.clone();
                let mut dn = logits.clone();
                up[c] += h;
                dn[c] -= h;
                let num = (federated_bce(&up, target, &subset, w).unwrap().0
                    - federated_bce(&dn, target, &subset, w).unwrap().0)
                    / (2.0 * h);
                if subset.contains(&c) {
                    assert!((g[c] - num).abs() / g[c].abs().max(num.abs()).max(1e-4) < 1e-5);
                } else {
                    assert_eq!(g[c], 0.0);
                    assert_eq!(num, 0.0);
                }
            }
        }
    }
}
