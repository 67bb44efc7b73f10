//! Ray casting: images, exact depth, and visibility ground truth.

use nalgebra::Vector3;

use super::scene::{Primitive, Scene, Shape, Texture};
use crate::error::{Error, Result};
use crate::geometry::{Camera, DepthRange};

/// Rays closer than this to their origin are ignored.
const T_EPS: f64 = 1e-9;

/// Nearest hit of `origin + t * dir` with `t > T_EPS`, and the outward
/// normal there.
pub fn intersect(shape: &Shape, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    match shape {
        Shape::Plane { center, normal, axis_u, half_extent } => {
            let denom = normal.dot(dir);
            if denom.abs() < 1e-15 {
                return None;
            }
            let t = normal.dot(&(center - origin)) / denom;
            if t <= T_EPS {
                return None;
            }
            let d = origin + dir * t - center;
            let axis_v = normal.cross(axis_u);
            if d.dot(axis_u).abs() > half_extent[0] || d.dot(&axis_v).abs() > half_extent[1] {
                return None;
            }
            Some((t, if denom < 0.0 { *normal } else { -normal }))
        }
        Shape::Cuboid { min, max } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut n0, mut n1) = (0, 0);
            for a in 0..3 {
                if dir[a].abs() < 1e-15 {
                    if origin[a] < min[a] || origin[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let (mut ta, mut tb) = ((min[a] - origin[a]) / dir[a], (max[a] - origin[a]) / dir[a]);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                if ta > t0 {
                    t0 = ta;
                    n0 = a;
                }
                if tb < t1 {
                    t1 = tb;
                    n1 = a;
                }
            }
            if t0 > t1 {
                return None;
            }
            let (t, axis) = if t0 > T_EPS {
                (t0, n0)
            } else if t1 > T_EPS {
                (t1, n1)
            } else {
                return None;
            };
            let mut n = Vector3::zeros();
            n[axis] = -dir[axis].signum();
            Some((t, n))
        }
        Shape::Sphere { center, radius } => {
            let oc = origin - center;
            let a = dir.norm_squared();
            let b = oc.dot(dir);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t = [(-b - s) / a, (-b + s) / a].into_iter().find(|&t| t > T_EPS)?;
            let n = (origin + dir * t - center) / *radius;
            Some((t, if n.dot(dir) > 0.0 { -n } else { n }))
        }
    }
}

/// A ray's nearest surface hit.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub primitive: usize,
}

pub fn cast(primitives: &[Primitive], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, p) in primitives.iter().enumerate() {
        if let Some((t, normal)) = intersect(&p.shape, origin, dir) {
            if best.is_none_or(|b| t < b.t) {
                best = Some(Hit { t, point: origin + dir * t, normal, primitive: i });
            }
        }
    }
    best
}

fn hash(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn lattice(seed: u64, i: i64, j: i64, k: i64) -> f64 {
    let h = hash(seed ^ hash((i as u64).wrapping_mul(73_856_093) ^ hash((j as u64).wrapping_mul(19_349_663) ^ (k as u64).wrapping_mul(83_492_791))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear value noise in `[0, 1]` with smoothstep blending.
pub fn value_noise(seed: u64, p: &Vector3<f64>) -> f64 {
    let f = p.map(f64::floor);
    let r = p - f;
    let s = r.map(|x| x * x * (3.0 - 2.0 * x));
    let (i, j, k) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { s.x } else { 1.0 - s.x })
                    * (if dy == 1 { s.y } else { 1.0 - s.y })
                    * (if dz == 1 { s.z } else { 1.0 - s.z });
                acc += w * lattice(seed, i + dx, j + dy, k + dz);
            }
        }
    }
    acc
}

impl Texture {
    pub fn color(&self, p: &Vector3<f64>) -> [f32; 3] {
        let q = p * self.frequency;
        let noise = 0.65 * value_noise(self.seed, &q) + 0.35 * value_noise(self.seed.wrapping_add(1), &(q * 2.3));
        let c = q * 0.5;
        let parity = (c.x.floor() + c.y.floor() + c.z.floor()).rem_euclid(2.0);
        let m = ((1.0 - self.checker) * noise + self.checker * parity) as f32;
        std::array::from_fn(|i| self.color_a[i] * (1.0 - m) + self.color_b[i] * m)
    }
}

/// Ground-truth depth at one resolution; invalid pixels hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthLevel {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f32>,
    pub mask: Vec<bool>,
}

impl DepthLevel {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Coarse pixel `(r, c)` takes fine pixel `(r * factor, c * factor)`.
pub fn downsample_gt(level: &DepthLevel, factor: usize) -> Result<DepthLevel> {
    if factor == 0 || level.height % factor != 0 || level.width % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "downsample_gt: {}x{} not divisible by {factor}",
            level.height, level.width
        )));
    }
    let (h, w) = (level.height / factor, level.width / factor);
    let src = |r: usize, c: usize| r * factor * level.width + c * factor;
    Ok(DepthLevel {
        height: h,
        width: w,
        depth: (0..h * w).map(|i| level.depth[src(i / w, i % w)]).collect(),
        mask: (0..h * w).map(|i| level.mask[src(i / w, i % w)]).collect(),
    })
}

/// Rendered image and ground truth of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    /// Planar RGB `[3, H, W]`, quantized to 8-bit levels.
    pub image: Vec<f32>,
    /// Full, half and quarter resolution.
    pub levels: [DepthLevel; 3],
    pub camera: Camera,
}

/// World-space ray through pixel `(u, v)` at pyramid `scale`, scaled so
/// that the hit parameter equals the camera-frame depth.
pub fn pixel_ray(camera: &Camera, u: f64, v: f64, scale: f64) -> (Vector3<f64>, Vector3<f64>) {
    let d_cam = camera.intrinsics.scaled(scale).ray(u, v);
    (camera.center(), camera.pose.rotation.transpose() * d_cam)
}

/// Ray-casts every pixel. The returned camera carries a depth range that
/// brackets the rendered depths with a 5% margin.
pub fn render_view(scene: &Scene, view: usize) -> Result<RenderedView> {
    let camera = scene.cameras[view];
    let (h, w) = (scene.spec.height, scene.spec.width);
    let n = h * w;
    let gain = scene.gains[view];
    let mut image = vec![0.0f32; 3 * n];
    let mut depth = vec![0.0f32; n];
    let mut mask = vec![false; n];
    for r in 0..h {
        for c in 0..w {
            let (o, d) = pixel_ray(&camera, c as f64, r as f64, 1.0);
            let i = r * w + c;
            let Some(hit) = cast(&scene.primitives, &o, &d) else {
                continue;
            };
            depth[i] = hit.t as f32;
            mask[i] = true;
            let base = scene.primitives[hit.primitive].texture.color(&hit.point);
            let shade = (0.35 + 0.65 * hit.normal.dot(&scene.light).max(0.0)) as f32;
            for ch in 0..3 {
                image[ch * n + i] = ((base[ch] * shade * gain).clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    let valid: Vec<f32> = depth.iter().zip(&mask).filter(|(_, &m)| m).map(|(&d, _)| d).collect();
    if valid.is_empty() {
        return Err(Error::InvalidArgument(format!("view {view} sees no surface")));
    }
    let lo = valid.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let hi = valid.iter().copied().fold(0.0f32, f32::max) as f64;
    let camera = Camera { range: DepthRange::new(lo * 0.95, hi * 1.05)?, ..camera };
    let full = DepthLevel { height: h, width: w, depth, mask };
    let half = downsample_gt(&full, 2)?;
    let quarter = downsample_gt(&full, 4)?;
    Ok(RenderedView { image, levels: [full, half, quarter], camera })
}

/// Tolerance of the occlusion depth test, in world units.
pub const VISIBILITY_TOL: f64 = 1e-3;

/// Surface point seen through pixel `(u, v)` at `scale`.
pub fn surface_point(scene: &Scene, camera: &Camera, u: f64, v: f64, scale: f64) -> Option<Vector3<f64>> {
    let (o, d) = pixel_ray(camera, u, v, scale);
    cast(&scene.primitives, &o, &d).map(|h| h.point)
}

/// Whether world point `p` projects inside `source` and is not hidden
/// behind another surface.
pub fn point_visible(scene: &Scene, source: &Camera, p: &Vector3<f64>) -> bool {
    let (h, w) = (scene.spec.height as f64, scene.spec.width as f64);
    let (u, v, z) = source.project_world(p, 1.0);
    if z <= 0.0 || !(0.0..=w - 1.0).contains(&u) || !(0.0..=h - 1.0).contains(&v) {
        return false;
    }
    let (o, d) = pixel_ray(source, u, v, 1.0);
    match cast(&scene.primitives, &o, &d) {
        Some(hit) => hit.t >= z - VISIBILITY_TOL,
        None => true,
    }
}

/// `[h, w]` map at `scale`: 1 where the reference pixel's surface point is
/// inside the source image and unoccluded, else 0.
pub fn oracle_visibility(scene: &Scene, reference: &Camera, source: &Camera, scale: f64) -> Vec<f32> {
    let h = (scene.spec.height as f64 * scale).round() as usize;
    let w = (scene.spec.width as f64 * scale).round() as usize;
    (0..h * w)
        .map(|i| match surface_point(scene, reference, (i % w) as f64, (i / w) as f64, scale) {
            Some(p) if point_visible(scene, source, &p) => 1.0,
            _ => 0.0,
        })
        .collect()
}
