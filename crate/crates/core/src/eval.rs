//! AUROC for OOD scores (higher = more OOD).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auroc: f64,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub curve: Vec<(f64, f64)>,
    pub n_ind: usize,
    pub n_ood: usize,
}

impl RocResult {
    pub fn trapezoid_area(&self) -> f64 {
        self.curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5).sum()
    }
}

fn check(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    Ok(())
}

/// Mann-Whitney AUROC with half credit for ties, plus the ROC curve from a
/// threshold sweep over every distinct score.
pub fn auroc(ind: &[f64], ood: &[f64]) -> Result<RocResult> {
    check(ind)?;
    check(ood)?;
    let mut sorted_ind = ind.to_vec();
    sorted_ind.sort_by(f64::total_cmp);

    // Count in integers (twice the win count) so the result is exact.
    let mut twice_wins: u128 = 0;
    for &s in ood {
        let below = sorted_ind.partition_point(|&v| v < s);
        let upto = sorted_ind.partition_point(|&v| v <= s);
        twice_wins += 2 * below as u128 + (upto - below) as u128;
    }
    let pairs = ind.len() as u128 * ood.len() as u128;
    let auroc = twice_wins as f64 / (2 * pairs) as f64;

    let mut all: Vec<(f64, bool)> = ind.iter().map(|&s| (s, false)).chain(ood.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (n_ind, n_ood) = (ind.len() as f64, ood.len() as f64);
    let mut curve = vec![(0.0, 0.0)];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let threshold = all[i].0;
        while i < all.len() && all[i].0 == threshold {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((fp as f64 / n_ind, tp as f64 / n_ood));
    }
    Ok(RocResult { auroc, curve, n_ind: ind.len(), n_ood: ood.len() })
}
