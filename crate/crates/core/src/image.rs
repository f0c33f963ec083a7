use crate::error::{CoreError, Result};

/// 8-bit RGB image stored row-major as `H x W x 3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub id: String,
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(id: impl Into<String>, width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(CoreError::Shape(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(CoreError::Shape(format!(
                "expected {} bytes for {width}x{height} RGB, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { id: id.into(), width, height, pixels })
    }

    /// Image filled with a single color.
    pub fn filled(id: impl Into<String>, width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(id, width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// True when both dims are multiples of `stride`.
    pub fn is_divisible_by(&self, stride: usize) -> bool {
        self.width % stride == 0 && self.height % stride == 0
    }

    pub fn ensure_divisible_by(&self, stride: usize) -> Result<()> {
        if self.is_divisible_by(stride) {
            Ok(())
        } else {
            Err(CoreError::Shape(format!(
                "image {} is {}x{}, not divisible by {stride}",
                self.id, self.width, self.height
            )))
        }
    }

    /// Reflect-pads the right and bottom edges up to the next multiple of `stride`.
    ///
    /// Coordinates in the padded image coincide with the original ones, so
    /// outputs only need to be cropped to the original dims afterwards.
    pub fn pad_reflect_to_multiple(&self, stride: usize) -> Image {
        let w = self.width.div_ceil(stride) * stride;
        let h = self.height.div_ceil(stride) * stride;
        if w == self.width && h == self.height {
            return self.clone();
        }
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            let sy = reflect(y, self.height);
            for x in 0..w {
                let sx = reflect(x, self.width);
                pixels.extend_from_slice(&self.pixel(sx, sy));
            }
        }
        Image { id: self.id.clone(), width: w, height: h, pixels }
    }

    /// Channel-major float planes `[3, H, W]`, scaled to `[-1, 1]`.
    pub fn to_chw_normalized(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0f32; 3 * plane];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c] as f32 / 127.5 - 1.0;
            }
        }
        out
    }
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}
