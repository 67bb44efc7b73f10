//! Depth-map filtering, fusion into a colored point cloud, and depth and
//! point-cloud metrics.

use std::collections::HashMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::io::Point;

/// Relative depth band around the projected depth inside which source
/// neighbours count as the same surface during filtering.
const NEAR_TOL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Maximum round-trip reprojection error, in pixels.
    pub reproj_tol: f64,
    /// Maximum relative depth difference of the round trip.
    pub depth_tol: f64,
    /// Source views that must agree for a pixel to survive.
    pub min_consistent: usize,
    /// Photometric confidence a pixel must exceed.
    pub confidence_threshold: f64,
    /// Fused points closer than this are merged into one.
    pub merge_radius: f64,
    /// Largest relative depth spread of the 2x2 patch a reprojection is
    /// interpolated from; wider patches straddle a depth edge.
    pub patch_spread: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { reproj_tol: 1.0, depth_tol: 0.01, min_consistent: 3, confidence_threshold: 0.3, merge_radius: 2e-3, patch_spread: 0.01 }
    }
}

/// One depth map with its camera. `scale` maps the camera's native
/// intrinsics to the depth map's resolution.
#[derive(Debug, Clone)]
pub struct DepthView {
    pub camera: Camera,
    pub scale: f64,
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f32>,
    pub mask: Vec<bool>,
    pub colors: Vec<[u8; 3]>,
}

impl DepthView {
    /// `colors` are sampled from a planar RGB image `[3, H, W]` at the
    /// top-left fine pixel of every depth pixel.
    pub fn new(camera: Camera, depth: Vec<f32>, mask: Vec<bool>, height: usize, width: usize, rgb: &[f32], image_h: usize, image_w: usize) -> Result<Self> {
        if depth.len() != height * width || mask.len() != depth.len() {
            return Err(Error::shape("depth_view", format!("{} depths, {} mask for {height}x{width}", depth.len(), mask.len())));
        }
        if image_h % height != 0 || image_w % width != 0 || image_h / height != image_w / width || rgb.len() != 3 * image_h * image_w {
            return Err(Error::shape("depth_view", format!("image {image_h}x{image_w} vs depth {height}x{width}")));
        }
        let f = image_h / height;
        let n = image_h * image_w;
        let colors = (0..height * width)
            .map(|i| {
                let j = (i / width) * f * image_w + (i % width) * f;
                std::array::from_fn(|c| (rgb[c * n + j].clamp(0.0, 1.0) * 255.0).round() as u8)
            })
            .collect();
        Ok(Self { camera, scale: 1.0 / f as f64, height, width, depth, mask, colors })
    }

    fn valid(&self, i: usize) -> bool {
        self.mask[i] && self.depth[i] > 0.0 && self.depth[i].is_finite()
    }

    pub fn point(&self, i: usize) -> Vector3<f64> {
        self.point_at(i, self.depth[i] as f64)
    }

    /// World point on pixel `i`'s ray at `depth`.
    pub fn point_at(&self, i: usize, depth: f64) -> Vector3<f64> {
        self.camera.unproject((i % self.width) as f64, (i / self.width) as f64, depth, self.scale)
    }

    /// Depth at continuous pixel `(u, v)`, bilinear in inverse depth over
    /// the valid 2x2 neighbours admitted by `patch`.
    fn sample_depth(&self, u: f64, v: f64, patch: Patch) -> Option<f64> {
        let (w, h) = (self.width, self.height);
        if w < 2 || h < 2 || !(0.0..=(w - 1) as f64).contains(&u) || !(0.0..=(h - 1) as f64).contains(&v) {
            return None;
        }
        let x0 = (u.floor() as usize).min(w - 2);
        let y0 = (v.floor() as usize).min(h - 2);
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let (mut inv, mut total) = (0.0, 0.0);
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let i = (y0 + dy) * w + x0 + dx;
                let d = self.depth[i] as f64;
                match patch {
                    Patch::Whole { .. } if !self.valid(i) => return None,
                    Patch::Near { expected, tol } if !self.valid(i) || (d / expected - 1.0).abs() >= tol => continue,
                    _ => {}
                }
                lo = lo.min(d);
                hi = hi.max(d);
                inv += wy * wx / d;
                total += wy * wx;
            }
        }
        let ok = match patch {
            Patch::Whole { spread } => hi <= lo * (1.0 + spread),
            Patch::Near { .. } => total > 1e-9,
        };
        ok.then(|| total / inv)
    }
}

/// Which neighbours of a 2x2 patch a depth sample may use.
#[derive(Clone, Copy)]
enum Patch {
    /// All four, valid and within a relative depth `spread` of each other,
    /// so the sample never straddles a depth edge.
    Whole { spread: f64 },
    /// The valid ones within relative `tol` of the `expected` depth, with
    /// renormalized weights; robust at silhouettes.
    Near { expected: f64, tol: f64 },
}

/// Depth of `view` pixel `i` re-estimated through `other`, if `other`'s
/// depth at the projection and the round trip both agree within the
/// tolerances. `strict` samples whole patches only.
fn consistent_depth(view: &DepthView, i: usize, other: &DepthView, cfg: &FusionConfig, strict: bool) -> Option<f64> {
    let d = view.depth[i] as f64;
    let x = view.point(i);
    let (u, v, z) = other.camera.project_world(&x, other.scale);
    if z <= 0.0 {
        return None;
    }
    let patch = if strict { Patch::Whole { spread: cfg.patch_spread } } else { Patch::Near { expected: z, tol: NEAR_TOL } };
    let ds = other.sample_depth(u, v, patch)?;
    if (ds - z).abs() / z >= cfg.depth_tol {
        return None;
    }
    let xs = other.camera.unproject(u, v, ds, other.scale);
    let (ub, vb, zb) = view.camera.project_world(&xs, view.scale);
    let err = ((ub - (i % view.width) as f64).powi(2) + (vb - (i / view.width) as f64).powi(2)).sqrt();
    ((err < cfg.reproj_tol) && ((zb - d).abs() / d < cfg.depth_tol)).then_some(zb)
}

/// Keeps a pixel iff at least `min_consistent` other views confirm it.
/// `min_consistent = 0` returns the input masks.
pub fn geometric_filter(views: &[DepthView], cfg: &FusionConfig) -> Vec<Vec<bool>> {
    views
        .iter()
        .enumerate()
        .map(|(r, view)| {
            (0..view.depth.len())
                .map(|i| {
                    if !view.valid(i) {
                        return false;
                    }
                    if cfg.min_consistent == 0 {
                        return true;
                    }
                    let mut count = 0;
                    for (s, other) in views.iter().enumerate() {
                        if s != r && consistent_depth(view, i, other, cfg, false).is_some() {
                            count += 1;
                            if count >= cfg.min_consistent {
                                return true;
                            }
                        }
                    }
                    false
                })
                .collect()
        })
        .collect()
}

/// `confidence > threshold`; a threshold of 0 or below keeps everything.
pub fn photometric_filter(confidence: &[f32], threshold: f64) -> Vec<bool> {
    confidence.iter().map(|&c| threshold <= 0.0 || c as f64 > threshold).collect()
}

/// Each surviving pixel becomes one point on its ray, at the mean of its
/// own depth and the consistent depths reprojected from the other views;
/// points within `merge_radius` of an earlier point are merged into it.
/// Views are processed in order.
pub fn fuse(views: &[DepthView], cfg: &FusionConfig) -> Vec<Point> {
    let mut merger = Merger::new(cfg.merge_radius);
    for (r, view) in views.iter().enumerate() {
        for i in (0..view.depth.len()).filter(|&i| view.valid(i)) {
            let mut sum = view.depth[i] as f64;
            let mut n = 1.0;
            for (s, other) in views.iter().enumerate() {
                if s != r {
                    if let Some(z) = consistent_depth(view, i, other, cfg, true) {
                        sum += z;
                        n += 1.0;
                    }
                }
            }
            merger.add(view.point_at(i, sum / n), view.colors[i]);
        }
    }
    merger.finish()
}

/// Incremental merging of nearby points (running mean of positions, first
/// color kept).
struct Merger {
    radius: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
    sums: Vec<(Vector3<f64>, f64, [u8; 3])>,
}

impl Merger {
    fn new(radius: f64) -> Self {
        Self { radius, cells: HashMap::new(), sums: Vec::new() }
    }

    fn key(&self, p: &Vector3<f64>) -> [i64; 3] {
        [0, 1, 2].map(|a| (p[a] / self.radius).floor() as i64)
    }

    fn add(&mut self, p: Vector3<f64>, color: [u8; 3]) {
        if self.radius > 0.0 {
            let k = self.key(&p);
            let mut best: Option<(usize, f64)> = None;
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else { continue };
                        for &j in ids {
                            let (s, n, _) = &self.sums[j];
                            let d = (s / *n - p).norm();
                            if d < self.radius && best.is_none_or(|(_, bd)| d < bd) {
                                best = Some((j, d));
                            }
                        }
                    }
                }
            }
            if let Some((j, _)) = best {
                self.sums[j].0 += p;
                self.sums[j].1 += 1.0;
                return;
            }
            self.cells.entry(k).or_default().push(self.sums.len());
        }
        self.sums.push((p, 1.0, color));
    }

    fn finish(self) -> Vec<Point> {
        self.sums
            .into_iter()
            .map(|(s, n, color)| {
                let p = s / n;
                Point { position: [p.x, p.y, p.z], color }
            })
            .collect()
    }
}

/// Exact nearest-neighbour queries over a fixed point set: a uniform grid
/// searched in growing shells, with brute force once the shells exceed
/// the grid.
pub struct NearestIndex {
    points: Vec<Vector3<f64>>,
    cell: f64,
    origin: Vector3<f64>,
    dims: [i64; 3],
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl NearestIndex {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let points = points.to_vec();
        if points.is_empty() {
            return Self { points, cell: 1.0, origin: Vector3::zeros(), dims: [0; 3], cells: HashMap::new() };
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in &points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let ext = hi - lo;
        let vol = ext.iter().map(|e| e.max(1e-9)).product::<f64>();
        let longest = ext.max().max(1e-9);
        // About two points per cell for surface-like clouds.
        let cell = (vol / points.len() as f64).cbrt().max(longest / 1024.0).max(1e-9);
        let dims = [0, 1, 2].map(|a| (ext[a] / cell).floor() as i64 + 1);
        let mut index = Self { points, cell, origin: lo, dims, cells: HashMap::new() };
        for i in 0..index.points.len() {
            let k = index.key(&index.points[i]);
            index.cells.entry(k).or_default().push(i);
        }
        index
    }

    fn key(&self, p: &Vector3<f64>) -> [i64; 3] {
        [0, 1, 2].map(|a| ((p[a] - self.origin[a]) / self.cell).floor() as i64)
    }

    /// Distance to the nearest indexed point (`None` when empty).
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let k = self.key(q);
        // Shells beyond this radius cannot contain any cell of the grid.
        let max_ring = (0..3).map(|a| (k[a]).abs().max((k[a] - self.dims[a]).abs())).max().unwrap_or(0) + 1;
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring.min(64) {
            for dz in -ring..=ring {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                            for &i in ids {
                                best = best.min((self.points[i] - q).norm());
                            }
                        }
                    }
                }
            }
            if best <= ring as f64 * self.cell {
                return Some(best);
            }
        }
        if max_ring > 64 {
            best = self.points.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
        }
        Some(best)
    }
}

/// Nearest-neighbour distance of every query point by exhaustive search.
pub fn brute_force_nearest(points: &[Vector3<f64>], queries: &[Vector3<f64>]) -> Vec<Option<f64>> {
    queries
        .iter()
        .map(|q| points.iter().map(|p| (p - q).norm()).min_by(f64::total_cmp))
        .collect()
}

/// Point-cloud metrics. Distances are in world units, percentages in
/// `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub depth_mae: Option<f64>,
    pub accuracy: f64,
    pub completeness: f64,
    pub overall: f64,
    pub threshold: f64,
    pub accuracy_pct: f64,
    pub completeness_pct: f64,
    pub f1: f64,
    /// Set when either cloud was empty; every metric is then 0.
    pub degenerate: bool,
}

pub fn eval_pointcloud(pred: &[Vector3<f64>], gt: &[Vector3<f64>], threshold: f64) -> MetricReport {
    if pred.is_empty() || gt.is_empty() {
        return MetricReport {
            depth_mae: None,
            accuracy: 0.0,
            completeness: 0.0,
            overall: 0.0,
            threshold,
            accuracy_pct: 0.0,
            completeness_pct: 0.0,
            f1: 0.0,
            degenerate: true,
        };
    }
    let one_way = |from: &[Vector3<f64>], to: &NearestIndex| {
        let d: Vec<f64> = from.iter().map(|p| to.nearest(p).expect("nonempty")).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let pct = 100.0 * d.iter().filter(|&&x| x <= threshold).count() as f64 / d.len() as f64;
        (mean, pct)
    };
    let (accuracy, accuracy_pct) = one_way(pred, &NearestIndex::new(gt));
    let (completeness, completeness_pct) = one_way(gt, &NearestIndex::new(pred));
    let f1 = if accuracy_pct + completeness_pct > 0.0 {
        2.0 * accuracy_pct * completeness_pct / (accuracy_pct + completeness_pct)
    } else {
        0.0
    };
    MetricReport {
        depth_mae: None,
        accuracy,
        completeness,
        overall: (accuracy + completeness) / 2.0,
        threshold,
        accuracy_pct,
        completeness_pct,
        f1,
        degenerate: false,
    }
}

pub fn positions(points: &[Point]) -> Vec<Vector3<f64>> {
    points.iter().map(|p| Vector3::from(p.position)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confidence_thresholds() {
        assert_eq!(photometric_filter(&[0.2, 0.5], 0.3), vec![false, true]);
        assert_eq!(photometric_filter(&[0.0, 0.5], 0.0), vec![true, true]);
    }

    #[test]
    fn grid_matches_brute_force_on_far_queries() {
        let pts: Vec<Vector3<f64>> = (0..50).map(|i| Vector3::new(i as f64 * 0.1, (i % 7) as f64 * 0.05, 0.0)).collect();
        let idx = NearestIndex::new(&pts);
        for q in [Vector3::new(100.0, -3.0, 2.0), Vector3::new(0.33, 0.1, 0.01), Vector3::new(-0.5, 0.0, 0.0)] {
            let want = brute_force_nearest(&pts, &[q])[0].unwrap();
            assert_eq!(idx.nearest(&q).unwrap(), want);
        }
    }

    #[test]
    fn empty_cloud_is_degenerate() {
        let r = eval_pointcloud(&[], &[Vector3::zeros()], 0.1);
        assert!(r.degenerate && r.f1 == 0.0);
    }
}
