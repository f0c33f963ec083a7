//! Seeded synthetic image pairs with exact ground truth.

use imd_core::geometry::{apply_homography, in_image};
use imd_core::{Image, InstanceMaskPair, Mask};
use nalgebra::{Matrix3, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DataError, Result};
use crate::texture::{Texture, TextureMode};

const MAX_ROTATION_DEG: f64 = 30.0;
const MIN_SCALE: f64 = 0.8;
const MAX_SCALE: f64 = 1.25;
const MAX_SHIFT: f64 = 0.125;
const MAX_PERSPECTIVE: f64 = 0.4;
const MIN_OVERLAP: f64 = 0.5;
const RETRIES: usize = 64;

/// Two views of one planar texture related by `h` (A pixels to B pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub id: String,
    pub image_a: Image,
    pub image_b: Image,
    pub h: Matrix3<f64>,
}

fn to_u8(c: [f64; 3]) -> [u8; 3] {
    c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

#[derive(Debug, Clone, Copy)]
struct Photometric {
    contrast: f64,
    brightness: f64,
}

impl Photometric {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self { contrast: rng.random_range(0.8..1.2), brightness: rng.random_range(-0.1..0.1) }
    }

    fn apply(&self, c: [f64; 3]) -> [f64; 3] {
        c.map(|v| (v - 0.5) * self.contrast + 0.5 + self.brightness)
    }
}

fn render(id: &str, w: usize, h: usize, f: impl Fn(f64, f64) -> [f64; 3]) -> Result<Image> {
    let mut px = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            px.extend(to_u8(f(x as f64, y as f64)));
        }
    }
    Ok(Image::new(id, w, h, px)?)
}

/// Random homography about the image center; `magnitude` in `[0, 1]` scales
/// rotation (up to 30 degrees), log-scale (within [0.8, 1.25]), shift and
/// perspective jitter.
pub fn random_homography(rng: &mut ChaCha8Rng, magnitude: f64, w: usize, h: usize) -> Matrix3<f64> {
    if magnitude == 0.0 {
        return Matrix3::identity();
    }
    let theta = rng.random_range(-1.0..1.0) * MAX_ROTATION_DEG.to_radians() * magnitude;
    let scale = (rng.random_range(MIN_SCALE.ln()..MAX_SCALE.ln()) * magnitude).exp();
    let tx = rng.random_range(-1.0..1.0) * MAX_SHIFT * w as f64 * magnitude;
    let ty = rng.random_range(-1.0..1.0) * MAX_SHIFT * h as f64 * magnitude;
    let px = rng.random_range(-1.0..1.0) * MAX_PERSPECTIVE / w as f64 * magnitude;
    let py = rng.random_range(-1.0..1.0) * MAX_PERSPECTIVE / h as f64 * magnitude;
    let (c, s) = (theta.cos() * scale, theta.sin() * scale);
    let core = Matrix3::new(c, -s, tx, s, c, ty, px, py, 1.0);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let to_center = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
    let back = Matrix3::new(1.0, 0.0, cx, 0.0, 1.0, cy, 0.0, 0.0, 1.0);
    let hm = back * core * to_center;
    hm / hm[(2, 2)]
}

/// Fraction of A's pixel centers (sampled every 2 px) that land inside B.
pub fn overlap_fraction(hm: &Matrix3<f64>, w: usize, h: usize) -> f64 {
    let mut inside = 0usize;
    let mut total = 0usize;
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            total += 1;
            if apply_homography(hm, x as f64, y as f64).is_some_and(|(u, v)| in_image(u, v, w, h)) {
                inside += 1;
            }
        }
    }
    inside as f64 / total as f64
}

/// A homography pair of procedural texture.
pub fn gen_synthetic_pair(
    seed: u64,
    mode: TextureMode,
    warp_magnitude: f64,
    dims: (usize, usize),
) -> Result<SyntheticPair> {
    if !(0.0..=1.0).contains(&warp_magnitude) {
        return Err(DataError::Invalid(format!("warp magnitude {warp_magnitude} outside [0, 1]")));
    }
    let (w, h) = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = Texture::new(rng.random(), mode, w.max(h) as f64);
    let mut hm = None;
    for _ in 0..RETRIES {
        let cand = random_homography(&mut rng, warp_magnitude, w, h);
        if cand.try_inverse().is_some() && overlap_fraction(&cand, w, h) >= MIN_OVERLAP {
            hm = Some(cand);
            break;
        }
    }
    let hm = hm.ok_or_else(|| DataError::Invalid(format!("no warp with >= 50% overlap after {RETRIES} draws")))?;
    let inv = hm.try_inverse().expect("checked invertible");
    let (pa, pb) = (Photometric::random(&mut rng), Photometric::random(&mut rng));
    let id = format!("warp-{seed}");
    let image_a = render(&format!("{id}-a"), w, h, |x, y| pa.apply(texture.render_pixel(x, y, |u, v| (u, v))))?;
    let image_b = render(&format!("{id}-b"), w, h, |x, y| {
        pb.apply(texture.render_pixel(x, y, |u, v| apply_homography(&inv, u, v).unwrap_or((f64::MAX, f64::MAX))))
    })?;
    Ok(SyntheticPair { id, image_a, image_b, h: hm })
}

/// Several copies of one sprite over a moving background.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiInstancePair {
    pub id: String,
    pub image_a: Image,
    pub image_b: Image,
    /// Visible masks of every instance in A and B.
    pub instances: Vec<InstanceMaskPair>,
    /// Instance whose masks define the evaluation pair.
    pub designated: usize,
    /// Background motion, A pixels to B pixels.
    pub background: Matrix3<f64>,
    /// Per-instance motion, A pixels to B pixels.
    pub motions: Vec<Matrix3<f64>>,
}

impl MultiInstancePair {
    pub fn evaluation_masks(&self) -> &InstanceMaskPair {
        &self.instances[self.designated]
    }
}

fn translation(d: Vector2<f64>) -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, d.x, 0.0, 1.0, d.y, 0.0, 0.0, 1.0)
}

fn disc(w: usize, h: usize, c: Vector2<f64>, r: f64) -> Mask {
    let mut m = Mask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            if (x as f64 - c.x).powi(2) + (y as f64 - c.y).powi(2) <= r * r {
                m.set(x, y, true);
            }
        }
    }
    m
}

/// Visible masks when later discs are drawn over earlier ones.
fn visible(discs: &[Mask]) -> Vec<Mask> {
    let mut out = discs.to_vec();
    for i in 0..discs.len() {
        for j in i + 1..discs.len() {
            for (k, &covered) in discs[j].data().iter().enumerate() {
                if covered {
                    let (x, y) = (k % discs[j].width, k / discs[j].width);
                    out[i].set(x, y, false);
                }
            }
        }
    }
    out
}

fn overlap_ok(discs: &[Mask]) -> bool {
    for i in 0..discs.len() {
        for j in i + 1..discs.len() {
            let small = discs[i].count().min(discs[j].count()) as f64;
            if discs[i].intersection(&discs[j]) as f64 > 0.2 * small {
                return false;
            }
        }
    }
    true
}

/// `n_instances >= 2` identical sprites with individual translations over a
/// background that shifts by a few pixels; instance 0 is designated.
pub fn gen_multi_instance_pair(seed: u64, n_instances: usize, dims: (usize, usize)) -> Result<MultiInstancePair> {
    if n_instances < 2 {
        return Err(DataError::Invalid(format!("need at least two instances, got {n_instances}")));
    }
    let (w, h) = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background_tex = Texture::new(rng.random(), TextureMode::Noise, w.max(h) as f64).with_contrast(0.5);
    let r = 0.14 * w.min(h) as f64;
    let sprite = Texture::new(rng.random(), TextureMode::Mixed, 2.0 * r);
    let lo = r + 1.0;
    let (hi_x, hi_y) = (w as f64 - r - 2.0, h as f64 - r - 2.0);
    if hi_x <= lo || hi_y <= lo {
        return Err(DataError::Invalid(format!("{w}x{h} too small for sprites")));
    }
    for _ in 0..RETRIES * 4 {
        let bg = Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let mut centers_a = Vec::new();
        let mut centers_b = Vec::new();
        for _ in 0..n_instances {
            let ca = Vector2::new(rng.random_range(lo..hi_x), rng.random_range(lo..hi_y));
            let d = Vector2::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
            let cb = ca + d;
            centers_a.push(ca);
            centers_b.push(Vector2::new(cb.x.clamp(lo, hi_x), cb.y.clamp(lo, hi_y)));
        }
        let discs_a: Vec<Mask> = centers_a.iter().map(|&c| disc(w, h, c, r)).collect();
        let discs_b: Vec<Mask> = centers_b.iter().map(|&c| disc(w, h, c, r)).collect();
        if !overlap_ok(&discs_a) || !overlap_ok(&discs_b) {
            continue;
        }
        let vis_a = visible(&discs_a);
        let vis_b = visible(&discs_b);
        let motions: Vec<Matrix3<f64>> = centers_a.iter().zip(&centers_b).map(|(a, b)| translation(b - a)).collect();
        let Some((cx, cy)) = vis_a[0].centroid() else { continue };
        let target = motions[0] * nalgebra::Vector3::new(cx, cy, 1.0);
        if !vis_b[0].contains(target.x, target.y) {
            continue;
        }
        let background = translation(bg);
        let pa = Photometric::random(&mut rng);
        let pb = Photometric::random(&mut rng);
        let draw = |x: f64, y: f64, centers: &[Vector2<f64>], vis: &[Mask], shift: Vector2<f64>| -> [f64; 3] {
            let (xi, yi) = (x as usize, y as usize);
            for (k, c) in centers.iter().enumerate() {
                if vis[k].get(xi, yi) {
                    return sprite.render_pixel(x, y, |u, v| (u - c.x + r, v - c.y + r));
                }
            }
            background_tex.render_pixel(x, y, |u, v| (u - shift.x, v - shift.y))
        };
        let id = format!("multi-{seed}");
        let image_a = render(&format!("{id}-a"), w, h, |x, y| pa.apply(draw(x, y, &centers_a, &vis_a, Vector2::zeros())))?;
        let image_b = render(&format!("{id}-b"), w, h, |x, y| pb.apply(draw(x, y, &centers_b, &vis_b, bg)))?;
        let instances = vis_a
            .into_iter()
            .zip(vis_b)
            .map(|(a, b)| InstanceMaskPair::new(a, b, "sprite"))
            .collect::<std::result::Result<Vec<_>, _>>();
        let Ok(instances) = instances else { continue };
        return Ok(MultiInstancePair { id, image_a, image_b, instances, designated: 0, background, motions });
    }
    Err(DataError::Invalid(format!("could not place {n_instances} sprites without overlap")))
}
