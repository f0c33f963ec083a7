use imd_core::{FineMatchSet, InstanceMaskPair};
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};

/// Matches starting in the source instance (`N`) and those also ending in the
/// target instance (`M`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImimReport {
    pub n_source_hits: usize,
    pub n_both_hits: usize,
    /// `100 M / N`; `None` when `N = 0`.
    pub score: Option<f64>,
    pub valid: bool,
}

/// Scores one pair; `dims_*` are the `(W, H)` of the matched images.
pub fn imim_score(
    matches: &FineMatchSet,
    mp: &InstanceMaskPair,
    dims_a: (usize, usize),
    dims_b: (usize, usize),
) -> Result<ImimReport> {
    let (sa, sb) = (&mp.source_mask, &mp.target_mask);
    if (sa.width, sa.height) != dims_a || (sb.width, sb.height) != dims_b {
        return Err(EvalError::Shape(format!(
            "masks are {}x{} / {}x{}, images are {}x{} / {}x{}",
            sa.width, sa.height, sb.width, sb.height, dims_a.0, dims_a.1, dims_b.0, dims_b.1
        )));
    }
    let mut n = 0;
    let mut m = 0;
    for f in matches.iter() {
        if sa.contains(f.xa, f.ya) {
            n += 1;
            if sb.contains(f.xb, f.yb) {
                m += 1;
            }
        }
    }
    let score = (n > 0).then(|| 100.0 * m as f64 / n as f64);
    Ok(ImimReport { n_source_hits: n, n_both_hits: m, score, valid: n > 0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImimAggregate {
    /// Mean of per-pair scores over valid pairs.
    pub mean_of_ratios: Option<f64>,
    /// `100 sum(M) / sum(N)` over all pairs.
    pub ratio_of_sums: Option<f64>,
    pub valid_pairs: usize,
    pub total_pairs: usize,
}

pub fn aggregate_imim(reports: &[ImimReport]) -> ImimAggregate {
    let valid: Vec<f64> = reports.iter().filter_map(|r| r.score).collect();
    let n: usize = reports.iter().map(|r| r.n_source_hits).sum();
    let m: usize = reports.iter().map(|r| r.n_both_hits).sum();
    ImimAggregate {
        mean_of_ratios: (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64),
        ratio_of_sums: (n > 0).then(|| 100.0 * m as f64 / n as f64),
        valid_pairs: valid.len(),
        total_pairs: reports.len(),
    }
}
