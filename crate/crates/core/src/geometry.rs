//! Pinhole cameras, relative poses, inverse-depth hypotheses and the
//! plane-sweep warp grid.
//!
//! Conventions: poses map world to camera (`x_cam = R x_world + t`) acting
//! on column vectors; pixel centres sit at integer coordinates; `u` is the
//! column and `v` the row.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const POSE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::InvalidArgument(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn identity() -> Self {
        Self { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0 }
    }

    /// Intrinsics of an image resampled by `s` (all four terms scale).
    pub fn scaled(&self, s: f64) -> Self {
        Self { fx: self.fx * s, fy: self.fy * s, cx: self.cx * s, cy: self.cy * s }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Normalized ray `K^-1 (u, v, 1)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Camera-frame point to `(u, v, z)`.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let z = p.z;
        (self.fx * p.x / z + self.cx, self.fy * p.y / z + self.cy, z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > POSE_TOL || (det - 1.0).abs() > POSE_TOL || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "rotation not orthonormal (err {ortho:.2e}, det {det:.6})"
            )));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Pose of a camera at `eye` looking at `target` (y axis points down in
    /// the image, so `up` is mapped to -y).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let z = (target - eye).normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::InvalidArgument("look_at: up is parallel to view direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self::new(r, -(r * eye))
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Pose mapping reference-camera coordinates to source-camera coordinates.
pub fn relative_pose(reference: &CameraPose, source: &CameraPose) -> CameraPose {
    let r = source.rotation * reference.rotation.transpose();
    let t = source.translation - r * reference.translation;
    CameraPose { rotation: r, translation: t }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub d_min: f64,
    pub d_max: f64,
}

impl DepthRange {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self> {
        if !(d_min > 0.0 && d_min < d_max && d_max.is_finite()) {
            return Err(Error::InvalidArgument(format!("depth range [{d_min}, {d_max}] must satisfy 0 < min < max")));
        }
        Ok(Self { d_min, d_max })
    }

    pub fn contains(&self, d: f64) -> bool {
        d >= self.d_min && d <= self.d_max
    }
}

/// Depths uniformly spaced in inverse depth, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthHypotheses {
    pub values: Vec<f64>,
}

impl DepthHypotheses {
    pub fn count(&self) -> usize {
        self.values.len()
    }
}

/// `d_j = 1 / (1/d_min - (1/d_min - 1/d_max) * j / (D - 1))`.
pub fn sample_inverse_depths(range: &DepthRange, count: usize) -> Result<DepthHypotheses> {
    if count < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 hypotheses, got {count}")));
    }
    let range = DepthRange::new(range.d_min, range.d_max)?;
    Ok(DepthHypotheses { values: inverse_depth_samples(range.d_min, range.d_max, count) })
}

/// Samples without validation; `count >= 2`, `0 < lo <= hi`.
pub(crate) fn inverse_depth_samples(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (a, b) = (1.0 / lo, 1.0 / hi);
    let mut v: Vec<f64> = (0..count)
        .map(|j| 1.0 / (a - (a - b) * j as f64 / (count - 1) as f64))
        .collect();
    v[0] = lo;
    v[count - 1] = hi;
    v
}

/// Result of projecting a reference pixel at a hypothesized depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    /// False when the point lies on or behind the source image plane.
    pub in_front: bool,
}

/// `p_src ~ K_src (R_rel (K_ref^-1 p d) + t_rel)`.
pub fn project(
    pixel: (f64, f64),
    depth: f64,
    k_ref: &CameraIntrinsics,
    k_src: &CameraIntrinsics,
    rel: &CameraPose,
) -> Projection {
    let x_ref = k_ref.ray(pixel.0, pixel.1) * depth;
    let x_src = rel.transform(&x_ref);
    if x_src.z <= 0.0 {
        return Projection { u: f64::NAN, v: f64::NAN, depth: x_src.z, in_front: false };
    }
    let (u, v, z) = k_src.project(&x_src);
    Projection { u, v, depth: z, in_front: true }
}

/// Per-hypothesis, per-pixel source coordinates for plane sweeping.
#[derive(Debug, Clone)]
pub struct WarpGrid {
    pub depths: usize,
    pub height: usize,
    pub width: usize,
    /// Layout `[D, 2, h, w]`: column then row coordinate.
    pub coords: Vec<f32>,
    /// Layout `[D, h, w]`.
    pub valid: Vec<bool>,
}

/// Coordinate written for invalid entries; lies outside every image.
pub const INVALID_COORD: f32 = -1.0e4;

impl WarpGrid {
    /// Source coordinate `(u, v)` of hypothesis `j` at pixel `(row, col)`.
    pub fn at(&self, j: usize, row: usize, col: usize) -> (f32, f32) {
        let hw = self.height * self.width;
        let base = j * 2 * hw + row * self.width + col;
        (self.coords[base], self.coords[base + hw])
    }

    pub fn is_valid(&self, j: usize, row: usize, col: usize) -> bool {
        self.valid[(j * self.height + row) * self.width + col]
    }

    /// Sampling grid `[2, D*h, w]` for [`crate::tensor::bilinear_sample`].
    pub fn sampling_coords<T: Real>(&self) -> Tensor<T> {
        let hw = self.height * self.width;
        let n = self.depths * hw;
        let mut out = vec![T::zero(); 2 * n];
        for j in 0..self.depths {
            for i in 0..hw {
                out[j * hw + i] = T::lit(self.coords[j * 2 * hw + i] as f64);
                out[n + j * hw + i] = T::lit(self.coords[j * 2 * hw + hw + i] as f64);
            }
        }
        Tensor::from_vec(&[2, self.depths * self.height, self.width], out).expect("sized")
    }
}

/// Warp grid with one shared hypothesis list for all pixels, at an image
/// pyramid level `scale` (intrinsics multiplied by `scale`).
#[allow(clippy::too_many_arguments)]
pub fn build_warp_grid(
    k_ref: &CameraIntrinsics,
    k_src: &CameraIntrinsics,
    rel: &CameraPose,
    hypotheses: &DepthHypotheses,
    height: usize,
    width: usize,
    scale: f64,
) -> WarpGrid {
    let d = hypotheses.count();
    let hw = height * width;
    let mut per_pixel = Vec::with_capacity(d * hw);
    for &dj in &hypotheses.values {
        per_pixel.extend(std::iter::repeat_n(dj, hw));
    }
    build_warp_grid_per_pixel(k_ref, k_src, rel, &per_pixel, d, height, width, scale)
}

/// Warp grid where each pixel carries its own hypotheses (`[D, h, w]`).
#[allow(clippy::too_many_arguments)]
pub fn build_warp_grid_per_pixel(
    k_ref: &CameraIntrinsics,
    k_src: &CameraIntrinsics,
    rel: &CameraPose,
    depths: &[f64],
    count: usize,
    height: usize,
    width: usize,
    scale: f64,
) -> WarpGrid {
    let hw = height * width;
    assert_eq!(depths.len(), count * hw, "per-pixel depth layout");
    let kr = k_ref.scaled(scale);
    let ks = k_src.scaled(scale);
    let (wmax, hmax) = ((width - 1) as f64, (height - 1) as f64);
    let mut coords = vec![INVALID_COORD; count * 2 * hw];
    let mut valid = vec![false; count * hw];
    for j in 0..count {
        for row in 0..height {
            for col in 0..width {
                let i = row * width + col;
                let p = project((col as f64, row as f64), depths[j * hw + i], &kr, &ks, rel);
                let inside = p.in_front && p.u >= 0.0 && p.u <= wmax && p.v >= 0.0 && p.v <= hmax;
                if inside {
                    coords[j * 2 * hw + i] = p.u as f32;
                    coords[j * 2 * hw + hw + i] = p.v as f32;
                    valid[j * hw + i] = true;
                }
            }
        }
    }
    WarpGrid { depths: count, height, width, coords, valid }
}

/// Full camera: intrinsics at native resolution, pose and depth range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub range: DepthRange,
}

impl Camera {
    /// World point to `(u, v, z)` in this camera at pyramid `scale`.
    pub fn project_world(&self, p: &Vector3<f64>, scale: f64) -> (f64, f64, f64) {
        self.intrinsics.scaled(scale).project(&self.pose.transform(p))
    }

    /// Pixel at camera-frame depth `z` to a world point.
    pub fn unproject(&self, u: f64, v: f64, z: f64, scale: f64) -> Vector3<f64> {
        let x_cam = self.intrinsics.scaled(scale).ray(u, v) * z;
        self.pose.inverse_transform(&x_cam)
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.center()
    }

    /// Text form: `extrinsic`, 4x4 matrix rows, `intrinsic`, 3x3 rows,
    /// then `d_min d_max`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("extrinsic\n");
        let m = self.pose.matrix();
        for r in 0..4 {
            let row: Vec<String> = (0..4).map(|c| fmt_num(m[(r, c)])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s.push_str("intrinsic\n");
        let k = self.intrinsics.matrix();
        for r in 0..3 {
            let row: Vec<String> = (0..3).map(|c| fmt_num(k[(r, c)])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        let _ = writeln!(s, "{} {}", fmt_num(self.range.d_min), fmt_num(self.range.d_max));
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |d: String| Error::data("<camera>", d);
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let mut expect = |tag: &str| -> Result<()> {
            match lines.next() {
                Some(l) if l == tag => Ok(()),
                other => Err(bad(format!("expected '{tag}', got {other:?}"))),
            }
        };
        expect("extrinsic")?;
        let rest: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        let nums = |l: &str| -> Result<Vec<f64>> {
            l.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| bad(format!("{t:?}: {e}"))))
                .collect()
        };
        if rest.len() < 10 || rest[5] != "intrinsic" {
            return Err(bad("expected 4 extrinsic rows, 'intrinsic', 3 rows and a depth line".into()));
        }
        let mut ext = Matrix4::zeros();
        for r in 0..4 {
            let row = nums(rest[1 + r])?;
            if row.len() != 4 {
                return Err(bad(format!("extrinsic row {r} has {} values", row.len())));
            }
            for c in 0..4 {
                ext[(r, c)] = row[c];
            }
        }
        let mut k = Matrix3::zeros();
        for r in 0..3 {
            let row = nums(rest[6 + r])?;
            if row.len() != 3 {
                return Err(bad(format!("intrinsic row {r} has {} values", row.len())));
            }
            for c in 0..3 {
                k[(r, c)] = row[c];
            }
        }
        let dr = nums(rest[9])?;
        if dr.len() < 2 {
            return Err(bad("depth line needs d_min d_max".into()));
        }
        let rotation: Matrix3<f64> = ext.fixed_view::<3, 3>(0, 0).into();
        let translation: Vector3<f64> = ext.fixed_view::<3, 1>(0, 3).into();
        Ok(Self {
            intrinsics: CameraIntrinsics::new(k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)])?,
            pose: CameraPose::new(rotation, translation)?,
            range: DepthRange::new(dr[0], dr[1])?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Data { detail, .. } => Error::data(path, detail),
            Error::InvalidArgument(d) => Error::data(path, d),
            other => other,
        })
    }
}

/// Shortest text that parses back to the same `f64`.
fn fmt_num(v: f64) -> String {
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rot(ax: f64, ay: f64, az: f64) -> Matrix3<f64> {
        *nalgebra::Rotation3::from_euler_angles(ax, ay, az).matrix()
    }

    #[test]
    fn inverse_depth_closed_form() {
        let r = DepthRange::new(1.0, 2.0).unwrap();
        assert_eq!(sample_inverse_depths(&r, 2).unwrap().values, vec![1.0, 2.0]);
        let v = sample_inverse_depths(&r, 3).unwrap().values;
        assert!((v[1] - 4.0 / 3.0).abs() < 1e-12);
        assert!(sample_inverse_depths(&r, 1).is_err());
        assert!(DepthRange::new(1.0, 1.0).is_err());
    }

    #[test]
    fn relative_pose_identities() {
        let p = CameraPose::new(rot(0.1, -0.3, 0.7), Vector3::new(0.5, -1.0, 2.0)).unwrap();
        let same = relative_pose(&p, &p);
        assert!((same.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(same.translation.norm() < 1e-12);
        let from_id = relative_pose(&CameraPose::identity(), &p);
        assert!((from_id.rotation - p.rotation).abs().max() < 1e-12);
        assert!((from_id.translation - p.translation).norm() < 1e-12);
    }

    #[test]
    fn pose_validation() {
        let mut bad = Matrix3::identity();
        bad[(0, 0)] = -1.0; // reflection
        assert!(CameraPose::new(bad, Vector3::zeros()).is_err());
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn projection_behind_source_is_flagged() {
        let k = CameraIntrinsics::identity();
        let flip = CameraPose::new(rot(0.0, std::f64::consts::PI, 0.0), Vector3::zeros()).unwrap();
        let p = project((0.1, 0.2), 2.0, &k, &k, &flip);
        assert!(!p.in_front);
    }

    #[test]
    fn look_at_points_z_at_target() {
        let eye = Vector3::new(3.0, -2.0, 1.0);
        let pose = CameraPose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let c = pose.transform(&Vector3::zeros());
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12);
        assert!((c.z - eye.norm()).abs() < 1e-12);
        assert!((pose.center() - eye).norm() < 1e-12);
        // A point above the target appears in the upper half of the image.
        assert!(pose.transform(&Vector3::new(0.0, 0.0, 1.0)).y < 0.0);
    }

    #[test]
    fn camera_text_round_trip() {
        let cam = Camera {
            intrinsics: CameraIntrinsics::new(80.0, 81.5, 39.5, 31.25).unwrap(),
            pose: CameraPose::new(rot(0.3, 0.2, -0.1), Vector3::new(0.1, 0.2, 5.0)).unwrap(),
            range: DepthRange::new(2.5, 7.5).unwrap(),
        };
        let text = cam.to_text();
        assert!(text.starts_with("extrinsic\n"));
        assert_eq!(text.lines().count(), 10);
        assert_eq!(Camera::parse(&text).unwrap(), cam);
        assert!(Camera::parse("extrinsic\n1 0 0 0\n").is_err());
    }

    #[test]
    fn identity_rig_grid_is_lattice() {
        let k = CameraIntrinsics::new(10.0, 10.0, 2.0, 1.5).unwrap();
        let hyps = sample_inverse_depths(&DepthRange::new(1.0, 4.0).unwrap(), 4).unwrap();
        let g = build_warp_grid(&k, &k, &CameraPose::identity(), &hyps, 3, 4, 1.0);
        for j in 0..4 {
            for r in 0..3 {
                for c in 0..4 {
                    let (u, v) = g.at(j, r, c);
                    assert!((u - c as f32).abs() < 1e-5 && (v - r as f32).abs() < 1e-5);
                    assert!(g.is_valid(j, r, c));
                }
            }
        }
    }
}
