//! Pixel-level localisation metrics.
//!
//! Best F1 sweeps the thresholds `i/256` for `i = 1..=256`; a pixel is
//! predicted positive when its probability is at least the threshold.

use crate::error::{Error, Result};

pub const THRESHOLDS: usize = 256;

pub fn threshold(i: usize) -> f64 {
    i as f64 / THRESHOLDS as f64
}

/// Counts of positives and negatives per probability bucket, where bucket
/// `b` holds probabilities in `[b/256, (b+1)/256)` and `p = 1` lands in 256.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram {
    pos: Vec<u64>,
    neg: Vec<u64>,
}

impl Default for Histogram {
    fn default() -> Self {
        Histogram {
            pos: vec![0; THRESHOLDS + 1],
            neg: vec![0; THRESHOLDS + 1],
        }
    }
}

fn bucket(p: f64) -> usize {
    // exact: scaling by a power of two does not round
    ((p.clamp(0.0, 1.0) * THRESHOLDS as f64).floor() as usize).min(THRESHOLDS)
}

impl Histogram {
    pub fn new(probs: &[f64], gt: &[f64]) -> Self {
        let mut h = Histogram::default();
        h.extend(probs, gt);
        h
    }

    pub fn extend(&mut self, probs: &[f64], gt: &[f64]) {
        for (&p, &g) in probs.iter().zip(gt) {
            let b = bucket(p);
            if g >= 0.5 {
                self.pos[b] += 1;
            } else {
                self.neg[b] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.pos.iter_mut().zip(&other.pos) {
            *a += b;
        }
        for (a, b) in self.neg.iter_mut().zip(&other.neg) {
            *a += b;
        }
    }

    /// `(tp, fp, fn)` at threshold index `i`.
    fn counts_at(&self, i: usize) -> (u64, u64, u64) {
        let tp: u64 = self.pos[i..].iter().sum();
        let fp: u64 = self.neg[i..].iter().sum();
        let total_pos: u64 = self.pos.iter().sum();
        (tp, fp, total_pos - tp)
    }

    pub fn f1_at(&self, i: usize) -> f64 {
        let (tp, fp, fnn) = self.counts_at(i);
        f1_from_counts(tp, fp, fnn)
    }

    /// Largest F1 over the grid and the smallest threshold attaining it.
    pub fn best(&self) -> (f64, f64) {
        let total_pos: u64 = self.pos.iter().sum();
        let (mut tp, mut fp) = (0u64, 0u64);
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in (1..=THRESHOLDS).rev() {
            tp += self.pos[i];
            fp += self.neg[i];
            let f = f1_from_counts(tp, fp, total_pos - tp);
            if f >= best.0 {
                best = (f, threshold(i));
            }
        }
        best
    }
}

/// `2tp / (2tp + fp + fn)`, defined as 1 when there is nothing to find and
/// nothing predicted.
pub fn f1_from_counts(tp: u64, fp: u64, fnn: u64) -> f64 {
    if tp + fp + fnn == 0 {
        1.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fnn) as f64
    }
}

/// Best F1 of one image and the threshold attaining it.
pub fn best_f1(probs: &[f64], gt: &[f64]) -> (f64, f64) {
    Histogram::new(probs, gt).best()
}

/// F1 at a fixed threshold.
pub fn f1_at(probs: &[f64], gt: &[f64], t: f64) -> f64 {
    let (mut tp, mut fp, mut fnn) = (0, 0, 0);
    for (&p, &g) in probs.iter().zip(gt) {
        match (p >= t, g >= 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    f1_from_counts(tp, fp, fnn)
}

/// Probability that a random positive pixel scores above a random negative
/// one, ties counting one half.
pub fn auc(probs: &[f64], gt: &[f64]) -> Result<f64> {
    if probs.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "auc: {} scores for {} labels",
            probs.len(),
            gt.len()
        )));
    }
    if probs.iter().any(|p| p.is_nan()) {
        return Err(Error::Numerical("auc: NaN score".into()));
    }
    let mut pairs: Vec<(f64, bool)> = probs.iter().zip(gt).map(|(&p, &g)| (p, g >= 0.5)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_pos = pairs.iter().filter(|p| p.1).count() as u64;
    let n_neg = pairs.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(
            "auc needs both classes in the ground truth".into(),
        ));
    }
    // twice the Mann–Whitney count, so ties stay integral
    let (mut twice, mut neg_below) = (0u64, 0u64);
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let pos = pairs[i..j].iter().filter(|p| p.1).count() as u64;
        let neg = (j - i) as u64 - pos;
        twice += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(twice as f64 / (2 * n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(best_f1(&gt, &gt).0, 1.0);
        assert_eq!(auc(&gt, &gt).unwrap(), 1.0);
    }

    #[test]
    fn two_pixel_example() {
        let (f, t) = best_f1(&[0.6, 0.4], &[1.0, 0.0]);
        assert_eq!(f, 1.0);
        assert!(t > 0.4 && t <= 0.6);
    }

    #[test]
    fn four_pixel_example() {
        let probs = [0.9, 0.8, 0.3, 0.1];
        let gt = [1.0, 0.0, 1.0, 0.0];
        let (f, t) = best_f1(&probs, &gt);
        // thresholds in (0.1, 0.3] mark 0.9, 0.8, 0.3: tp 2, fp 1
        assert!((f - 0.8).abs() < 1e-15);
        assert!(t > 0.1 && t <= 0.3);
        assert_eq!(auc(&probs, &gt).unwrap(), 0.75);
    }

    #[test]
    fn ties_and_single_class() {
        assert_eq!(auc(&[0.5; 6], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn empty_truth_and_empty_prediction_is_perfect() {
        assert_eq!(best_f1(&[0.0, 0.0], &[0.0, 0.0]).0, 1.0);
        assert_eq!(f1_at(&[0.9, 0.0], &[0.0, 0.0], 0.5), 0.0);
    }
}
