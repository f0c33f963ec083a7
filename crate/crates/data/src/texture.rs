//! Procedural textures defined on the whole plane, so warped views never run
//! out of content.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureMode {
    /// Multi-scale value noise only.
    Noise,
    /// Flat-colored geometric shapes over a plain background.
    Shapes,
    /// Shapes composited over noise.
    Mixed,
}

impl std::str::FromStr for TextureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noise" => Ok(Self::Noise),
            "shapes" => Ok(Self::Shapes),
            "mixed" => Ok(Self::Mixed),
            other => Err(format!("unknown texture mode {other:?} (expected noise, shapes or mixed)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, cos: f64, sin: f64 },
    Ring { cx: f64, cy: f64, r: f64, width: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { cx, cy, hw, hh, cos, sin } => {
                let (dx, dy) = (x - cx, y - cy);
                let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                u.abs() <= hw && v.abs() <= hh
            }
            Shape::Ring { cx, cy, r, width } => {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                (d - r).abs() <= width
            }
        }
    }
}

fn hash(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64, channel: u64) -> f64 {
    let h = hash(seed ^ hash((ix as u64).wrapping_mul(0x1000_0000_01B3) ^ hash((iy as u64) ^ (channel << 56))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Procedural RGB texture in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Texture {
    seed: u64,
    mode: TextureMode,
    octaves: Vec<(f64, f64)>,
    background: [f64; 3],
    shapes: Vec<(Shape, [f64; 3])>,
    contrast: f64,
}

impl Texture {
    /// Texture whose shapes are scattered over `[-extent/2, 3 extent/2]^2`.
    pub fn new(seed: u64, mode: TextureMode, extent: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = extent / 64.0;
        let octaves = vec![(24.0 * base, 0.45), (12.0 * base, 0.3), (6.0 * base, 0.17), (3.0 * base, 0.08)];
        let background = [rng.random(), rng.random(), rng.random()];
        let n_shapes = match mode {
            TextureMode::Noise => 0,
            _ => rng.random_range(18..30),
        };
        let mut shapes = Vec::with_capacity(n_shapes);
        for _ in 0..n_shapes {
            let cx = rng.random_range(-0.5 * extent..1.5 * extent);
            let cy = rng.random_range(-0.5 * extent..1.5 * extent);
            let size = rng.random_range(0.04 * extent..0.16 * extent);
            let shape = match rng.random_range(0..3) {
                0 => Shape::Disc { cx, cy, r: size },
                1 => {
                    let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
                    Shape::Rect { cx, cy, hw: size, hh: size * rng.random_range(0.3..1.0), cos: a.cos(), sin: a.sin() }
                }
                _ => Shape::Ring { cx, cy, r: size, width: size * 0.3 },
            };
            shapes.push((shape, [rng.random(), rng.random(), rng.random()]));
        }
        Self { seed: rng.random(), mode, octaves, background, shapes, contrast: 1.0 }
    }

    /// Scales noise deviation around mid-grey.
    pub fn with_contrast(mut self, contrast: f64) -> Self {
        self.contrast = contrast;
        self
    }

    fn noise(&self, x: f64, y: f64, channel: u64) -> f64 {
        let mut v = 0.0;
        for (k, &(period, amp)) in self.octaves.iter().enumerate() {
            let (u, w) = (x / period, y / period);
            let (ix, iy) = (u.floor(), w.floor());
            let (fx, fy) = (smooth(u - ix), smooth(w - iy));
            let s = self.seed.wrapping_add(k as u64 * 7919);
            let (ix, iy) = (ix as i64, iy as i64);
            let c00 = lattice(s, ix, iy, channel);
            let c10 = lattice(s, ix + 1, iy, channel);
            let c01 = lattice(s, ix, iy + 1, channel);
            let c11 = lattice(s, ix + 1, iy + 1, channel);
            let top = c00 + (c10 - c00) * fx;
            let bottom = c01 + (c11 - c01) * fx;
            v += amp * (top + (bottom - top) * fy);
        }
        0.5 + (v - 0.5) * 1.6 * self.contrast
    }

    /// Color at a continuous position.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = match self.mode {
            TextureMode::Shapes => self.background,
            _ => [self.noise(x, y, 0), self.noise(x, y, 1), self.noise(x, y, 2)],
        };
        for (shape, color) in &self.shapes {
            if shape.contains(x, y) {
                c = match self.mode {
                    TextureMode::Mixed => [0.75 * color[0] + 0.25 * c[0], 0.75 * color[1] + 0.25 * c[1], 0.75 * color[2] + 0.25 * c[2]],
                    _ => *color,
                };
            }
        }
        c
    }

    /// 2x2 supersampled color of the pixel centered at `(x, y)` after mapping
    /// each subsample through `map`.
    pub fn render_pixel(&self, x: f64, y: f64, map: impl Fn(f64, f64) -> (f64, f64)) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for (dx, dy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
            let (u, v) = map(x + dx, y + dy);
            let c = self.sample(u, v);
            for k in 0..3 {
                acc[k] += c[k] / 4.0;
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_seeded_and_bounded() {
        let a = Texture::new(1, TextureMode::Mixed, 64.0);
        let b = Texture::new(1, TextureMode::Mixed, 64.0);
        let c = Texture::new(2, TextureMode::Mixed, 64.0);
        let mut differs = false;
        for i in 0..200 {
            let (x, y) = (i as f64 * 0.7 - 30.0, i as f64 * 0.37);
            assert_eq!(a.sample(x, y), b.sample(x, y));
            differs |= a.sample(x, y) != c.sample(x, y);
        }
        assert!(differs);
    }
}
