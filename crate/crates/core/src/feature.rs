use crate::error::{CoreError, Result};

/// Channel-major feature grid `[C, h, w]` tied to image pixels by `stride`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    stride: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, stride: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || stride == 0 {
            return Err(CoreError::Shape(format!(
                "degenerate feature map [{channels}, {height}, {width}] stride {stride}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(CoreError::Shape(format!(
                "feature buffer has {} values, expected {}",
                data.len(),
                channels * height * width
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::Invalid(format!("non-finite feature value at flat index {i}")));
        }
        Ok(Self { channels, height, width, stride, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, stride: usize) -> Self {
        Self { channels, height, width, stride, data: vec![0.0; channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// `(C, h, w)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Image dims `(W, H)` this map was computed from.
    pub fn image_dims(&self) -> (usize, usize) {
        (self.width * self.stride, self.height * self.stride)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Feature vector of the cell at `(x, y)`.
    pub fn vector(&self, x: usize, y: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.at(c, y, x)).collect()
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> Option<f32> {
        if self.shape() != other.shape() {
            return None;
        }
        Some(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_len() {
        assert!(FeatureMap::new(1, 1, 2, 8, vec![0.0, f32::NAN]).is_err());
        assert!(FeatureMap::new(1, 1, 2, 8, vec![0.0]).is_err());
    }

    #[test]
    fn indexing_is_channel_major() {
        let fm = FeatureMap::new(2, 1, 2, 8, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(fm.vector(1, 0), vec![2.0, 4.0]);
        assert_eq!(fm.image_dims(), (16, 8));
    }
}
