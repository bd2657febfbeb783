//! Ranking metrics over verification scores (higher = more likely target).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSet {
    pub positive_scores: Vec<f64>,
    pub negative_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(positive_scores: Vec<f64>, negative_scores: Vec<f64>) -> Result<Self> {
        let s = Self {
            positive_scores,
            negative_scores,
        };
        s.validate()?;
        Ok(s)
    }

    /// Scores are negated distances.
    pub fn from_distances(positive: &[f64], negative: &[f64]) -> Result<Self> {
        Self::new(
            positive.iter().map(|d| -d).collect(),
            negative.iter().map(|d| -d).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.positive_scores.is_empty() || self.negative_scores.is_empty() {
            return Err(Error::Precondition(format!(
                "metrics need both classes (got {} positive, {} negative scores)",
                self.positive_scores.len(),
                self.negative_scores.len()
            )));
        }
        if self
            .positive_scores
            .iter()
            .chain(&self.negative_scores)
            .any(|s| !s.is_finite())
        {
            return Err(Error::Precondition("scores must be finite".into()));
        }
        Ok(())
    }

    pub fn swapped(&self) -> Self {
        Self {
            positive_scores: self.negative_scores.clone(),
            negative_scores: self.positive_scores.clone(),
        }
    }
}

/// Mann-Whitney AUC: `P(pos > neg) + P(pos == neg) / 2` over all pairs.
pub fn roc_auc(scores: &ScoreSet) -> Result<f64> {
    scores.validate()?;
    let mut neg = scores.negative_scores.clone();
    neg.sort_by(f64::total_cmp);
    // twice the number of correctly ordered pairs, ties counting one
    let mut doubled: u128 = 0;
    for &p in &scores.positive_scores {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        doubled += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs = 2 * scores.positive_scores.len() as u128 * scores.negative_scores.len() as u128;
    Ok(doubled as f64 / pairs as f64)
}

/// How the operating point at a target FPR is read off the ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FprMode {
    /// Lowest threshold whose empirical FPR stays at or below the target.
    #[default]
    Conservative,
    /// Linear interpolation of the ROC curve at the target FPR.
    Interpolated,
}

/// TPR at the lowest score threshold whose empirical FPR is `<= fpr_target`
/// (samples at or above the threshold are called positive).
pub fn tpr_at_fpr(scores: &ScoreSet, fpr_target: f64) -> Result<f64> {
    tpr_at_fpr_with(scores, fpr_target, FprMode::Conservative)
}

pub fn tpr_at_fpr_with(scores: &ScoreSet, fpr_target: f64, mode: FprMode) -> Result<f64> {
    scores.validate()?;
    if !(fpr_target > 0.0 && fpr_target < 1.0) {
        return Err(Error::Precondition(format!(
            "fpr_target {fpr_target} must lie in (0, 1)"
        )));
    }
    let n_neg = scores.negative_scores.len();
    let n_pos = scores.positive_scores.len() as f64;
    let mut neg = scores.negative_scores.clone();
    neg.sort_by(|a, b| b.total_cmp(a));
    let mut pos = scores.positive_scores.clone();
    pos.sort_by(|a, b| b.total_cmp(a));
    let count_pos_above = |t: f64| pos.partition_point(|&p| p > t) as f64;

    // Largest false-positive count within budget.
    let mut allowed = 0;
    while allowed < n_neg && (allowed + 1) as f64 / n_neg as f64 <= fpr_target {
        allowed += 1;
    }
    let conservative = if allowed == n_neg {
        1.0
    } else {
        // every threshold admitting the (allowed+1)-th largest negative is over budget
        count_pos_above(neg[allowed]) / n_pos
    };
    match mode {
        FprMode::Conservative => Ok(conservative),
        FprMode::Interpolated => {
            let roc = roc_points(&pos, &neg);
            for pair in roc.windows(2) {
                let (f0, t0) = pair[0];
                let (f1, t1) = pair[1];
                if f0 <= fpr_target && fpr_target <= f1 {
                    if f1 == f0 {
                        return Ok(t1);
                    }
                    return Ok(t0 + (t1 - t0) * (fpr_target - f0) / (f1 - f0));
                }
            }
            Ok(conservative)
        }
    }
}

/// ROC vertices `(fpr, tpr)` from both lists sorted descending.
fn roc_points(pos_desc: &[f64], neg_desc: &[f64]) -> Vec<(f64, f64)> {
    let (np, nn) = (pos_desc.len() as f64, neg_desc.len() as f64);
    let mut thresholds: Vec<f64> = pos_desc.iter().chain(neg_desc).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for t in thresholds {
        let tp = pos_desc.partition_point(|&p| p >= t) as f64;
        let fp = neg_desc.partition_point(|&n| n >= t) as f64;
        pts.push((fp / nn, tp / np));
    }
    pts
}
