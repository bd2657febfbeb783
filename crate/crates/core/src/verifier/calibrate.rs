//! Radius selection by line search over validation distances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the line search maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Criterion {
    /// Highest TPR among radii whose FPR does not exceed `max_fpr`.
    TprAtFpr { max_fpr: f64 },
    /// Highest `TPR - FPR`.
    YoudenJ,
}

impl Criterion {
    pub fn tag(&self) -> String {
        match self {
            Criterion::TprAtFpr { max_fpr } => format!("tpr_at_fpr<={max_fpr:e}"),
            Criterion::YoudenJ => "youden_j".into(),
        }
    }
}

/// How to choose among radii with equal objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Widest gap between the radius and the nearest negative outside it.
    NegativeMargin,
    /// Radius closest to the middle of the gap between the farthest
    /// included positive and the nearest excluded negative.
    GapCenter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub size: usize,
    pub criterion: Criterion,
    pub tie_break: TieBreak,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            size: 512,
            criterion: Criterion::TprAtFpr { max_fpr: 1e-2 },
            tie_break: TieBreak::NegativeMargin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationResult {
    pub radius: f64,
    pub grid: Vec<f64>,
    /// Criterion value per grid point; `-1` marks radii violating the FPR cap.
    pub objective_per_candidate: Vec<f64>,
    pub criterion: String,
    pub tpr: f64,
    pub fpr: f64,
}

/// Fraction of `distances` inside the closed ball of radius `r`.
fn inside_rate(sorted: &[f64], r: f64) -> f64 {
    sorted.partition_point(|&d| d <= r) as f64 / sorted.len() as f64
}

/// Evaluates a uniform grid on `[0, max distance]`, extended with every
/// observed distance so that each achievable operating point is a candidate,
/// and returns the best radius under `spec`.
pub fn calibrate_radius(positive: &[f64], negative: &[f64], spec: &GridSpec) -> Result<CalibrationResult> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::Precondition(format!(
            "calibration needs both classes (got {} positive, {} negative distances)",
            positive.len(),
            negative.len()
        )));
    }
    if let Some(d) = positive.iter().chain(negative).find(|d| !d.is_finite() || **d < 0.0) {
        return Err(Error::Precondition(format!("invalid validation distance {d}")));
    }
    if spec.size < 2 {
        return Err(Error::Config("calibration grid needs at least 2 points".into()));
    }
    if let Criterion::TprAtFpr { max_fpr } = spec.criterion {
        if !(0.0..1.0).contains(&max_fpr) {
            return Err(Error::Config(format!("max_fpr {max_fpr} must be in [0, 1)")));
        }
    }
    let mut pos = positive.to_vec();
    let mut neg = negative.to_vec();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);

    let max_d = pos[pos.len() - 1].max(neg[neg.len() - 1]);
    let min_d = pos[0].min(neg[0]);
    if max_d == min_d {
        let r = max_d;
        return Ok(CalibrationResult {
            radius: r,
            grid: vec![r],
            objective_per_candidate: vec![objective(spec.criterion, 1.0, 1.0)],
            criterion: "degenerate".into(),
            tpr: 1.0,
            fpr: 1.0,
        });
    }

    let mut grid: Vec<f64> = (0..spec.size)
        .map(|i| max_d * i as f64 / (spec.size - 1) as f64)
        .chain(pos.iter().copied())
        .chain(neg.iter().copied())
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut objectives = Vec::with_capacity(grid.len());
    // ranked by objective, then lower FPR, then the tie-break key
    let mut best: Option<(usize, f64, f64, f64)> = None;
    for (i, &r) in grid.iter().enumerate() {
        let tpr = inside_rate(&pos, r);
        let fpr = inside_rate(&neg, r);
        let obj = objective(spec.criterion, tpr, fpr);
        objectives.push(obj);
        let key = tie_key(spec.tie_break, r, &pos, &neg);
        let better = match best {
            None => true,
            Some((_, bo, bf, bk)) => (obj, -fpr, key).partial_cmp(&(bo, -bf, bk)) == Some(std::cmp::Ordering::Greater),
        };
        if better {
            best = Some((i, obj, fpr, key));
        }
    }
    let (idx, obj, _, _) = best.expect("grid is non-empty");
    let radius = grid[idx];
    let criterion = if obj < 0.0 && matches!(spec.criterion, Criterion::TprAtFpr { .. }) {
        format!("{} (infeasible)", spec.criterion.tag())
    } else {
        spec.criterion.tag()
    };
    Ok(CalibrationResult {
        radius,
        tpr: inside_rate(&pos, radius),
        fpr: inside_rate(&neg, radius),
        grid,
        objective_per_candidate: objectives,
        criterion,
    })
}

fn objective(criterion: Criterion, tpr: f64, fpr: f64) -> f64 {
    match criterion {
        Criterion::TprAtFpr { max_fpr } => {
            if fpr <= max_fpr {
                tpr
            } else {
                -1.0
            }
        }
        Criterion::YoudenJ => tpr - fpr,
    }
}

/// Larger is preferred. Ties on the key keep the earlier (smaller) radius.
fn tie_key(rule: TieBreak, r: f64, pos: &[f64], neg: &[f64]) -> f64 {
    let next_neg = neg.get(neg.partition_point(|&d| d <= r)).copied();
    match rule {
        TieBreak::NegativeMargin => next_neg.map_or(f64::INFINITY, |d| d - r),
        TieBreak::GapCenter => {
            let inner = pos[..pos.partition_point(|&d| d <= r)]
                .last()
                .copied()
                .unwrap_or(0.0);
            match next_neg {
                Some(outer) => -(r - 0.5 * (inner + outer)).abs(),
                None => -(r - inner),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_sets_pick_the_positive_edge() {
        let res = calibrate_radius(&[1.0, 2.0], &[5.0, 6.0], &GridSpec::default()).unwrap();
        assert!(res.radius >= 2.0 && res.radius < 5.0);
        // exhaustive: the candidate in [2, 5) with the widest margin to 5 is 2 itself
        assert_eq!(res.radius, 2.0);
        assert_eq!((res.tpr, res.fpr), (1.0, 0.0));
        assert!(res.grid.contains(&res.radius));
        assert_eq!(res.grid.len(), res.objective_per_candidate.len());
    }

    #[test]
    fn equal_tpr_prefers_fewer_negatives_over_wider_margin() {
        let spec = GridSpec {
            criterion: Criterion::TprAtFpr { max_fpr: 0.5 },
            ..GridSpec::default()
        };
        // r = 5 also reaches tpr 1 with a wider gap to 20, but admits a negative
        let res = calibrate_radius(&[1.0, 2.0], &[5.0, 20.0], &spec).unwrap();
        assert_eq!((res.tpr, res.fpr), (1.0, 0.0));
        assert_eq!(res.radius, 2.0);
    }

    #[test]
    fn gap_center_tie_break() {
        let spec = GridSpec {
            tie_break: TieBreak::GapCenter,
            ..GridSpec::default()
        };
        let res = calibrate_radius(&[1.0, 2.0], &[5.0, 6.0], &spec).unwrap();
        assert!((res.radius - 3.5).abs() <= 6.0 / 511.0);
    }

    #[test]
    fn all_equal_is_degenerate() {
        let res = calibrate_radius(&[3.0, 3.0], &[3.0], &GridSpec::default()).unwrap();
        assert_eq!(res.criterion, "degenerate");
        assert_eq!(res.radius, 3.0);
    }

    #[test]
    fn missing_class_is_an_error() {
        assert!(calibrate_radius(&[], &[1.0], &GridSpec::default()).is_err());
        assert!(calibrate_radius(&[1.0], &[], &GridSpec::default()).is_err());
    }

    #[test]
    fn youden_accepts_some_false_positives() {
        let spec = GridSpec {
            criterion: Criterion::YoudenJ,
            ..GridSpec::default()
        };
        let pos: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let res = calibrate_radius(&pos, &[0.55, 5.0, 6.0], &spec).unwrap();
        assert_eq!(res.tpr, 1.0);
        assert!((res.fpr - 1.0 / 3.0).abs() < 1e-12);
    }
}
