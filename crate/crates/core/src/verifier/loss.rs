//! Hypersphere objectives over distances to the center.
//!
//! With the soft distance `s = sqrt(d^2 + 1)`:
//!
//! ```text
//! L_pos = mean(s_i - m)
//! L_neg = -mean(log(1 - exp(-beta (s_i - m)) + eps))
//! L     = lambda_pos L_pos + lambda_neg L_neg
//! ```
//!
//! For `m > 1` a negative at small distance makes `1 - exp(..)` negative;
//! that factor is floored at zero so every term stays finite (the floor is
//! inactive whenever `m <= 1`).

use crate::error::{Error, Result};

#[inline]
pub fn soft_distance(d: f64) -> f64 {
    d.mul_add(d, 1.0).sqrt()
}

/// Per-sample positive term as a function of the soft distance.
#[inline]
pub fn pos_term(s: f64, margin: f64) -> f64 {
    s - margin
}

/// Per-sample negative term as a function of the soft distance.
#[inline]
pub fn neg_term(s: f64, margin: f64, beta: f64, epsilon: f64) -> f64 {
    let u = (-(-beta * (s - margin)).exp_m1()).max(0.0);
    -(u + epsilon).ln()
}

/// Derivative of [`neg_term`] with respect to the soft distance.
#[inline]
pub fn neg_term_ds(s: f64, margin: f64, beta: f64, epsilon: f64) -> f64 {
    let x = -beta * (s - margin);
    let u = -x.exp_m1();
    if u <= 0.0 {
        return 0.0;
    }
    -beta * x.exp() / (u + epsilon)
}

fn check(distances: &[f64], what: &str) -> Result<()> {
    if distances.is_empty() {
        return Err(Error::Precondition(format!("{what} loss needs a non-empty batch")));
    }
    if let Some(d) = distances.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(Error::Precondition(format!(
            "{what} loss needs finite nonnegative distances, got {d}"
        )));
    }
    Ok(())
}

pub fn loss_pos(distances: &[f64], margin: f64) -> Result<f64> {
    check(distances, "positive")?;
    let n = distances.len() as f64;
    Ok(distances
        .iter()
        .map(|&d| pos_term(soft_distance(d), margin))
        .sum::<f64>()
        / n)
}

pub fn loss_neg(distances: &[f64], margin: f64, beta: f64, epsilon: f64) -> Result<f64> {
    check(distances, "negative")?;
    if !(epsilon > 0.0) || !(beta > 0.0) {
        return Err(Error::Precondition("beta and epsilon must be positive".into()));
    }
    let n = distances.len() as f64;
    Ok(distances
        .iter()
        .map(|&d| neg_term(soft_distance(d), margin, beta, epsilon))
        .sum::<f64>()
        / n)
}

/// `dL_pos / dd_i = d_i / (N sqrt(d_i^2 + 1))`.
pub fn loss_pos_grad(distances: &[f64]) -> Result<Vec<f64>> {
    check(distances, "positive")?;
    let n = distances.len() as f64;
    Ok(distances.iter().map(|&d| d / (n * soft_distance(d))).collect())
}

/// `dL_neg / dd_i`.
pub fn loss_neg_grad(distances: &[f64], margin: f64, beta: f64, epsilon: f64) -> Result<Vec<f64>> {
    check(distances, "negative")?;
    let n = distances.len() as f64;
    Ok(distances
        .iter()
        .map(|&d| {
            let s = soft_distance(d);
            neg_term_ds(s, margin, beta, epsilon) * d / (s * n)
        })
        .collect())
}

/// Loss weights and shape parameters shared by the objective functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_pos: f64,
    pub lambda_neg: f64,
    pub margin: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pos: 1.0,
            lambda_neg: 1.0,
            margin: 1.0,
            beta: 0.3,
            epsilon: 1e-6,
        }
    }
}

pub fn total_loss(pos: &[f64], neg: &[f64], w: &LossWeights) -> Result<f64> {
    let lp = loss_pos(pos, w.margin)?;
    let ln = loss_neg(neg, w.margin, w.beta, w.epsilon)?;
    Ok(w.lambda_pos * lp + w.lambda_neg * ln)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_values() {
        assert_eq!(loss_pos(&[0.0], 1.0).unwrap(), 0.0);
        assert!((loss_pos(&[3f64.sqrt()], 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((loss_pos(&[0.0, 3f64.sqrt()], 1.0).unwrap() - 0.5).abs() < 1e-12);
        let at_center = loss_neg(&[0.0], 1.0, 0.3, 1e-6).unwrap();
        assert!((at_center - 13.815_510_557_964_274).abs() < 1e-9);
        let mid = loss_neg(&[3f64.sqrt()], 1.0, 0.3, 1e-6).unwrap();
        assert!((mid - 1.350_222).abs() < 1e-6, "{mid}");
        let far = loss_neg(&[1e6], 1.0, 0.3, 1e-6).unwrap();
        assert!((far + 1e-6).abs() < 1e-9);
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights::default();
        let t = total_loss(&[0.0, 3f64.sqrt()], &[3f64.sqrt()], &w).unwrap();
        assert!((t - 1.850_222).abs() < 1e-6);
        let no_pos = LossWeights { lambda_pos: 0.0, ..w };
        assert_eq!(
            total_loss(&[5.0], &[1.0], &no_pos).unwrap(),
            loss_neg(&[1.0], 1.0, 0.3, 1e-6).unwrap()
        );
    }

    #[test]
    fn empty_and_invalid_batches() {
        assert!(loss_pos(&[], 1.0).is_err());
        assert!(loss_neg(&[], 1.0, 0.3, 1e-6).is_err());
        assert!(loss_pos(&[-1.0], 1.0).is_err());
        assert!(loss_neg(&[f64::NAN], 1.0, 0.3, 1e-6).is_err());
        assert!(loss_neg(&[1.0], 1.0, 0.3, 0.0).is_err());
    }

    #[test]
    fn large_margin_stays_finite() {
        let v = loss_neg(&[0.0, 0.5], 2.0, 0.3, 1e-6).unwrap();
        assert!(v.is_finite());
        assert_eq!(neg_term_ds(1.0, 2.0, 0.3, 1e-6), 0.0);
    }
}
