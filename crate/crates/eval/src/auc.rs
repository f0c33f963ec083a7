use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};

/// Per-pair errors (failures as `+inf`) and the thresholds to report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub errors: Vec<f64>,
    pub thresholds: Vec<f64>,
}

impl ErrorCurve {
    pub fn new(mut errors: Vec<f64>, thresholds: Vec<f64>) -> Result<Self> {
        if errors.iter().any(|e| e.is_nan() || *e < 0.0) {
            return Err(EvalError::Invalid("errors must be >= 0 (failures as +inf)".into()));
        }
        if thresholds.is_empty() || thresholds.windows(2).any(|w| w[1] <= w[0]) || thresholds[0] <= 0.0 {
            return Err(EvalError::Invalid("thresholds must be positive and strictly increasing".into()));
        }
        errors.sort_by(f64::total_cmp);
        Ok(Self { errors, thresholds })
    }

    pub fn auc(&self) -> Vec<f64> {
        self.thresholds.iter().map(|&t| auc_at(&self.errors, t)).collect()
    }
}

/// Normalized area under the recall curve `r(e) = |{e_i <= e}| / n` on `[0, t]`.
///
/// Each error contributes `max(0, t - e_i)` to the integral, so the result is
/// exact for any error set.
pub fn auc_at(errors: &[f64], t: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    let area: f64 = errors.iter().map(|&e| (t - e).max(0.0)).sum();
    area / (errors.len() as f64 * t)
}

pub fn auc(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    Ok(ErrorCurve::new(errors.to_vec(), thresholds.to_vec())?.auc())
}
