use crate::error::{CoreError, Result};

/// Binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(CoreError::Shape(format!(
                "mask buffer has {} values, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    /// Membership of a subpixel position, by nearest-pixel rounding.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let xi = x.round();
        let yi = y.round();
        if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
            return false;
        }
        self.get(xi as usize, yi as usize)
    }

    /// Mean pixel position of the set pixels.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Number of pixels set in both masks.
    pub fn intersection(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|b| *b as u8).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|b| *b != 0).collect())
    }
}

/// Source/target instance masks of one object, used by the IMIM metric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMaskPair {
    pub source_mask: Mask,
    pub target_mask: Mask,
    pub category: String,
}

impl InstanceMaskPair {
    pub fn new(source_mask: Mask, target_mask: Mask, category: impl Into<String>) -> Result<Self> {
        if source_mask.count() == 0 || target_mask.count() == 0 {
            return Err(CoreError::Invalid("instance masks need at least one set pixel".into()));
        }
        Ok(Self { source_mask, target_mask, category: category.into() })
    }
}
