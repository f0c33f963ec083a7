use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{cell_center, in_image};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseMatch {
    pub idx_a: usize,
    pub idx_b: usize,
    pub confidence: f32,
}

/// Cell-level matches; every cell of either image appears at most once.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoarseMatchSet {
    entries: Vec<CoarseMatch>,
}

impl CoarseMatchSet {
    /// Validates index ranges and mutual exclusivity in O(n).
    pub fn new(entries: Vec<CoarseMatch>, cells_a: usize, cells_b: usize) -> Result<Self> {
        let mut used_a = vec![false; cells_a];
        let mut used_b = vec![false; cells_b];
        for m in &entries {
            if m.idx_a >= cells_a || m.idx_b >= cells_b {
                return Err(CoreError::Invalid(format!(
                    "coarse match ({}, {}) outside grids of {cells_a}/{cells_b} cells",
                    m.idx_a, m.idx_b
                )));
            }
            if !(0.0..=1.0).contains(&m.confidence) {
                return Err(CoreError::Invalid(format!("confidence {} outside [0, 1]", m.confidence)));
            }
            if std::mem::replace(&mut used_a[m.idx_a], true) {
                return Err(CoreError::DuplicateMatch { side: "a", index: m.idx_a });
            }
            if std::mem::replace(&mut used_b[m.idx_b], true) {
                return Err(CoreError::DuplicateMatch { side: "b", index: m.idx_b });
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[CoarseMatch] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, CoarseMatch> {
        self.entries.iter()
    }
}

/// Subpixel match in original image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineMatch {
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
    pub confidence: f32,
    /// Position of the parent in the coarse match set.
    pub coarse_parent: usize,
    /// Set when local MNN had no survivor and the global argmax was used.
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FineMatchSet {
    entries: Vec<FineMatch>,
}

impl FineMatchSet {
    /// `dims_*` are `(W, H)` of the two images.
    pub fn new(entries: Vec<FineMatch>, dims_a: (usize, usize), dims_b: (usize, usize)) -> Result<Self> {
        let mut parents = std::collections::HashSet::new();
        for m in &entries {
            if !in_image(m.xa, m.ya, dims_a.0, dims_a.1) || !in_image(m.xb, m.yb, dims_b.0, dims_b.1) {
                return Err(CoreError::Invalid(format!(
                    "fine match ({:.3}, {:.3}) -> ({:.3}, {:.3}) outside image bounds",
                    m.xa, m.ya, m.xb, m.yb
                )));
            }
            if !parents.insert(m.coarse_parent) {
                return Err(CoreError::Invalid(format!(
                    "coarse parent {} refined twice",
                    m.coarse_parent
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Builds a set without the parent/bounds checks, for evaluation inputs
    /// that do not originate from the refiner.
    pub fn from_points(points: impl IntoIterator<Item = (f64, f64, f64, f64)>) -> Self {
        let entries = points
            .into_iter()
            .enumerate()
            .map(|(i, (xa, ya, xb, yb))| FineMatch {
                xa,
                ya,
                xb,
                yb,
                confidence: 1.0,
                coarse_parent: i,
                low_confidence: false,
            })
            .collect();
        Self { entries }
    }

    pub fn entries(&self) -> &[FineMatch] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, FineMatch> {
        self.entries.iter()
    }

    /// Keeps the matches satisfying `keep`, in order.
    pub fn filtered(&self, mut keep: impl FnMut(&FineMatch) -> bool) -> Self {
        Self { entries: self.entries.iter().filter(|m| keep(m)).copied().collect() }
    }

    /// Drops matches falling outside the given dims (undoes reflect padding).
    pub fn crop_to(&self, dims_a: (usize, usize), dims_b: (usize, usize)) -> Self {
        let entries = self
            .entries
            .iter()
            .filter(|m| in_image(m.xa, m.ya, dims_a.0, dims_a.1) && in_image(m.xb, m.yb, dims_b.0, dims_b.1))
            .copied()
            .collect();
        Self { entries }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchLevel {
    Coarse,
    Fine,
}

/// One line of the JSON-lines match stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
    pub conf: f32,
    pub level: MatchLevel,
}

impl MatchRecord {
    pub fn coarse(m: &CoarseMatch, grid_w_a: usize, grid_w_b: usize, stride: usize) -> Self {
        let (xa, ya) = cell_center(m.idx_a, grid_w_a, stride);
        let (xb, yb) = cell_center(m.idx_b, grid_w_b, stride);
        Self { xa, ya, xb, yb, conf: m.confidence, level: MatchLevel::Coarse }
    }

    pub fn fine(m: &FineMatch) -> Self {
        Self { xa: m.xa, ya: m.ya, xb: m.xb, yb: m.yb, conf: m.confidence, level: MatchLevel::Fine }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(a: usize, b: usize) -> CoarseMatch {
        CoarseMatch { idx_a: a, idx_b: b, confidence: 0.5 }
    }

    #[test]
    fn duplicate_indices_are_rejected() {
        assert!(CoarseMatchSet::new(vec![cm(0, 1), cm(2, 3)], 4, 4).is_ok());
        assert!(matches!(
            CoarseMatchSet::new(vec![cm(0, 1), cm(0, 3)], 4, 4),
            Err(CoreError::DuplicateMatch { side: "a", index: 0 })
        ));
        assert!(matches!(
            CoarseMatchSet::new(vec![cm(0, 1), cm(2, 1)], 4, 4),
            Err(CoreError::DuplicateMatch { side: "b", index: 1 })
        ));
        assert!(CoarseMatchSet::new(vec![cm(4, 0)], 4, 4).is_err());
    }

    #[test]
    fn fine_set_bounds() {
        let m = FineMatch {
            xa: -0.5,
            ya: 63.5,
            xb: 10.0,
            yb: 10.0,
            confidence: 0.9,
            coarse_parent: 0,
            low_confidence: false,
        };
        assert!(FineMatchSet::new(vec![m], (64, 64), (64, 64)).is_ok());
        let bad = FineMatch { xa: 63.6, ..m };
        assert!(FineMatchSet::new(vec![bad], (64, 64), (64, 64)).is_err());
        assert!(FineMatchSet::new(vec![m, m], (64, 64), (64, 64)).is_err());
    }

    #[test]
    fn record_json_shape() {
        let r = MatchRecord::coarse(&cm(5, 0), 4, 4, 8);
        let line = serde_json::to_string(&r).unwrap();
        assert_eq!(line, r#"{"xa":11.5,"ya":11.5,"xb":3.5,"yb":3.5,"conf":0.5,"level":"coarse"}"#);
    }
}
