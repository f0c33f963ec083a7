use nalgebra::{Matrix3, Point2, Vector3};

use crate::error::{CoreError, Result};

/// Pixel-center coordinates of flat cell `idx` on a grid `grid_w` cells wide.
#[inline]
pub fn cell_center(idx: usize, grid_w: usize, stride: usize) -> (f64, f64) {
    let row = idx / grid_w;
    let col = idx % grid_w;
    (
        (col as f64 + 0.5) * stride as f64 - 0.5,
        (row as f64 + 0.5) * stride as f64 - 0.5,
    )
}

/// Flat index of the cell containing pixel position `(x, y)`, if inside the grid.
pub fn containing_cell(x: f64, y: f64, grid_w: usize, grid_h: usize, stride: usize) -> Option<usize> {
    let col = ((x + 0.5) / stride as f64).floor();
    let row = ((y + 0.5) / stride as f64).floor();
    if col < 0.0 || row < 0.0 || col >= grid_w as f64 || row >= grid_h as f64 {
        return None;
    }
    Some(row as usize * grid_w + col as usize)
}

/// True when `(x, y)` lies in `[-0.5, w - 0.5] x [-0.5, h - 0.5]`.
#[inline]
pub fn in_image(x: f64, y: f64, w: usize, h: usize) -> bool {
    x >= -0.5 && y >= -0.5 && x <= w as f64 - 0.5 && y <= h as f64 - 0.5
}

/// Applies a homography; `None` when the point maps to infinity or behind the plane.
pub fn apply_homography(h: &Matrix3<f64>, x: f64, y: f64) -> Option<(f64, f64)> {
    let p = h * Vector3::new(x, y, 1.0);
    if p.z.abs() < 1e-12 || !p.z.is_finite() {
        return None;
    }
    Some((p.x / p.z, p.y / p.z))
}

/// Metric depth map; zero marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(CoreError::Shape(format!(
                "depth buffer has {} values, expected {}",
                data.len(),
                width * height
            )));
        }
        if data.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(CoreError::Invalid("depth values must be finite and >= 0".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self { width, height, data: vec![depth; width * height] }
    }

    /// Depth at the nearest pixel; `None` outside the map or where invalid.
    pub fn sample_nearest(&self, x: f64, y: f64) -> Option<f64> {
        let xi = x.round();
        let yi = y.round();
        if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
            return None;
        }
        let d = self.data[yi as usize * self.width + xi as usize];
        (d > 0.0).then_some(d)
    }
}

/// Pinhole camera with world-to-camera pose `x_cam = R x_world + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub depth: Option<DepthMap>,
}

impl CameraFrame {
    pub fn new(k: Matrix3<f64>, r: Matrix3<f64>, t: Vector3<f64>, depth: Option<DepthMap>) -> Result<Self> {
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(CoreError::Invalid("intrinsics must be upper triangular".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(CoreError::Invalid("focal lengths must be positive".into()));
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(CoreError::Invalid("R must be a rotation (R^T R = I, det R = 1)".into()));
        }
        if !t.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Invalid("translation must be finite".into()));
        }
        Ok(Self { k, r, t, depth })
    }

    /// Back-projects pixel `p` at depth `d` to world coordinates.
    pub fn unproject(&self, p: Point2<f64>, d: f64) -> Option<Vector3<f64>> {
        let k_inv = self.k.try_inverse()?;
        let ray = k_inv * Vector3::new(p.x, p.y, 1.0);
        let cam = ray * d;
        Some(self.r.transpose() * (cam - self.t))
    }

    /// Projects a world point; returns pixel and camera-space depth.
    pub fn project(&self, x: &Vector3<f64>) -> (Point2<f64>, f64) {
        let cam = self.r * x + self.t;
        let p = self.k * cam;
        (Point2::new(p.x / p.z, p.y / p.z), cam.z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cell_center_examples() {
        assert_eq!(cell_center(0, 4, 8), (3.5, 3.5));
        assert_eq!(cell_center(5, 4, 8), (11.5, 11.5));
        // row = 1, col = 3: x = 3.5 * 2 - 0.5, y = 1.5 * 2 - 0.5
        assert_eq!(cell_center(7, 4, 2), (6.5, 2.5));
    }

    #[test]
    fn containing_cell_inverts_center() {
        for idx in 0..48 {
            let (x, y) = cell_center(idx, 8, 8);
            assert_eq!(containing_cell(x, y, 8, 6, 8), Some(idx));
        }
        assert_eq!(containing_cell(-0.6, 3.0, 8, 6, 8), None);
        assert_eq!(containing_cell(63.6, 3.0, 8, 6, 8), None);
    }

    #[test]
    fn camera_rejects_non_rotation() {
        let k = Matrix3::new(100.0, 0.0, 32.0, 0.0, 100.0, 32.0, 0.0, 0.0, 1.0);
        let bad = Matrix3::identity() * 2.0;
        assert!(CameraFrame::new(k, bad, Vector3::zeros(), None).is_err());
        let mut lower = k;
        lower[(1, 0)] = 1.0;
        assert!(CameraFrame::new(lower, Matrix3::identity(), Vector3::zeros(), None).is_err());
        assert!(CameraFrame::new(k, Matrix3::identity(), Vector3::zeros(), None).is_ok());
    }

    #[test]
    fn unproject_project_round_trip() {
        let k = Matrix3::new(80.0, 0.0, 31.5, 0.0, 90.0, 31.5, 0.0, 0.0, 1.0);
        let r = nalgebra::Rotation3::from_euler_angles(0.1, -0.05, 0.2).into_inner();
        let cam = CameraFrame::new(k, r, Vector3::new(0.3, -0.1, 0.5), None).unwrap();
        let x = cam.unproject(Point2::new(12.0, 40.0), 3.0).unwrap();
        let (p, z) = cam.project(&x);
        assert!((p.x - 12.0).abs() < 1e-9 && (p.y - 40.0).abs() < 1e-9);
        assert!((z - 3.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn cell_centers_are_injective_and_inside(gw in 1usize..12, gh in 1usize..12, stride in 1usize..10) {
            let mut seen = std::collections::HashSet::new();
            for idx in 0..gw * gh {
                let (x, y) = cell_center(idx, gw, stride);
                prop_assert!(x > -0.5 && y > -0.5);
                prop_assert!(x < (gw * stride) as f64 - 0.5 && y < (gh * stride) as f64 - 0.5);
                prop_assert!(seen.insert(((x * 2.0) as i64, (y * 2.0) as i64)));
            }
        }
    }
}
