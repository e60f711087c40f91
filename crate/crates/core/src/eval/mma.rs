//! Mean matching accuracy under ground-truth homographies.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imgproc::Homography;
use crate::infer::Correspondence;

pub const DEFAULT_THRESHOLDS: [f64; 3] = [1.0, 3.0, 5.0];

/// Accuracy per threshold, averaged over `pairs`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MmaResult {
    pub thresholds: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub matches: usize,
    pub pairs: usize,
    /// Pairs with no correspondences; each contributes 0 accuracy.
    pub empty_pairs: usize,
}

impl MmaResult {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds.iter().position(|&t| t == threshold).map(|i| self.accuracy[i])
    }

    /// Mean over pairs of per-pair results sharing one threshold list.
    pub fn mean(results: &[MmaResult]) -> Result<MmaResult> {
        let first = results.first().ok_or_else(|| Error::EmptyInput("no pairs to average".into()))?;
        let mut acc = vec![0.0; first.thresholds.len()];
        let (mut matches, mut pairs, mut empty) = (0, 0, 0);
        for r in results {
            if r.thresholds != first.thresholds {
                return Err(Error::InvalidArgument("threshold lists differ".into()));
            }
            for (a, v) in acc.iter_mut().zip(&r.accuracy) {
                *a += v * r.pairs as f64;
            }
            matches += r.matches;
            pairs += r.pairs;
            empty += r.empty_pairs;
        }
        for a in &mut acc {
            *a /= pairs as f64;
        }
        Ok(MmaResult {
            thresholds: first.thresholds.clone(),
            accuracy: acc,
            matches,
            pairs,
            empty_pairs: empty,
        })
    }
}

fn check_thresholds(t: &[f64]) -> Result<()> {
    if t.is_empty() || t.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) || t.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument("thresholds must be finite, non-negative and strictly ascending".into()));
    }
    Ok(())
}

/// Number of matches with `‖H·a − b‖ ≤ τ` for each threshold.
pub fn correct_counts(corr: &[Correspondence], h: &Homography, thresholds: &[f64]) -> Result<Vec<usize>> {
    check_thresholds(thresholds)?;
    let mut counts = vec![0usize; thresholds.len()];
    for c in corr {
        let (x, y) = h.apply(c.src.x as f64, c.src.y as f64);
        let e = (x - c.dst.x as f64).hypot(y - c.dst.y as f64);
        // thresholds ascend, so the first satisfied one starts a suffix
        if let Some(i) = thresholds.iter().position(|&t| e <= t) {
            for n in &mut counts[i..] {
                *n += 1;
            }
        }
    }
    Ok(counts)
}

/// Accuracy of one pair; an empty set scores 0 and is flagged.
pub fn eval_mma(corr: &[Correspondence], h: &Homography, thresholds: &[f64]) -> Result<MmaResult> {
    let counts = correct_counts(corr, h, thresholds)?;
    let n = corr.len();
    Ok(MmaResult {
        thresholds: thresholds.to_vec(),
        accuracy: counts
            .iter()
            .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect(),
        matches: n,
        pairs: 1,
        empty_pairs: usize::from(n == 0),
    })
}
