//! Coarse-to-fine refinement: per-pixel depth ranges from the variance of
//! the previous stage's probability volume, thin visibility-weighted
//! volumes at 1/2 and full resolution, and per-pixel depth expectation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost_volume::{aggregate, group_correlation, warp_features};
use crate::error::{Error, Result};
use crate::geometry::{build_warp_grid_per_pixel, Camera, DepthRange};
use crate::nn::{Conv, Ctx};
use crate::regularization::regress_depth_per_pixel;
use crate::tensor::{ConvSpec, ParamStore, Real, Tensor};
use crate::unet::UNet3d;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    /// Hypotheses per pixel at the 1/2 and full resolution stages.
    pub stage_depths: [usize; 2],
    /// Group counts at the 1/2 and full resolution stages.
    pub stage_groups: [usize; 2],
    /// Half-width of the refined range in standard deviations.
    pub k: f64,
    /// Minimum range width in units of the stage's inverse-depth step.
    pub min_width_factor: f64,
    pub unet_channels: Vec<usize>,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            stage_depths: [16, 8],
            stage_groups: [4, 2],
            k: 1.5,
            min_width_factor: 2.0,
            unet_channels: vec![8, 16],
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_depths.iter().any(|&d| d < 2) {
            return Err(Error::Config(format!("cascade stage depths {:?} must be >= 2", self.stage_depths)));
        }
        if !(self.k > 0.0) || !(self.min_width_factor >= 0.0) {
            return Err(Error::Config("cascade k must be positive and min width nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-pixel depth bounds `[low, high]`, row-major `[h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelDepthRange {
    pub height: usize,
    pub width: usize,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl PixelDepthRange {
    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self) -> Self {
        let (h, w) = (self.height * 2, self.width * 2);
        let idx = |r: usize, c: usize| (r / 2) * self.width + c / 2;
        let low = (0..h * w).map(|i| self.low[idx(i / w, i % w)]).collect();
        let high = (0..h * w).map(|i| self.high[idx(i / w, i % w)]).collect();
        Self { height: h, width: w, low, high }
    }

    /// Hypotheses uniformly spaced in inverse depth within each pixel's
    /// range, ascending, laid out `[count, h, w]`.
    pub fn hypotheses(&self, count: usize) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; count * hw];
        for i in 0..hw {
            let (a, b) = (1.0 / self.low[i], 1.0 / self.high[i]);
            for j in 0..count {
                out[j * hw + i] = if j + 1 == count {
                    self.high[i]
                } else if j == 0 {
                    self.low[i]
                } else {
                    1.0 / (a - (a - b) * j as f64 / (count - 1) as f64)
                };
            }
        }
        out
    }
}

/// Mean and variance of depth under `prob [D, h, w]` with hypotheses
/// `depths` laid out `[D, h, w]` (pixel-specific) or `[D]` (shared).
pub fn depth_moments(prob: &[f32], depths: &[f64], count: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let shared = depths.len() == count;
    let dj = |j: usize, i: usize| if shared { depths[j] } else { depths[j * hw + i] };
    let mut mu = vec![0.0; hw];
    let mut var = vec![0.0; hw];
    for i in 0..hw {
        let m: f64 = (0..count).map(|j| prob[j * hw + i] as f64 * dj(j, i)).sum();
        let v: f64 = (0..count).map(|j| prob[j * hw + i] as f64 * (dj(j, i) - m).powi(2)).sum();
        mu[i] = m;
        var[i] = v.max(0.0);
    }
    (mu, var)
}

/// `[mu - k sigma, mu + k sigma]` per pixel, widened to at least
/// `min_width_factor` inverse-depth steps of a `next_count`-hypothesis
/// sweep over `range`, then clamped into `range`.
#[allow(clippy::too_many_arguments)]
pub fn uncertainty_range(
    prob: &[f32],
    depths: &[f64],
    count: usize,
    height: usize,
    width: usize,
    k: f64,
    range: &DepthRange,
    next_count: usize,
    min_width_factor: f64,
) -> PixelDepthRange {
    let hw = height * width;
    let (mu, var) = depth_moments(prob, depths, count, hw);
    let (inv_near, inv_far) = (1.0 / range.d_min, 1.0 / range.d_max);
    let min_inv_width = (min_width_factor * (inv_near - inv_far) / (next_count.max(2) - 1) as f64).min(inv_near - inv_far);
    let mut low = vec![0.0; hw];
    let mut high = vec![0.0; hw];
    for i in 0..hw {
        let sigma = var[i].sqrt();
        let m = mu[i].clamp(range.d_min, range.d_max);
        let lo = (m - k * sigma).max(range.d_min);
        let hi = (m + k * sigma).min(range.d_max);
        // Work in inverse depth: a = 1/lo (near) > b = 1/hi (far).
        let (mut a, mut b) = (1.0 / lo, 1.0 / hi);
        if a - b < min_inv_width {
            let c = 1.0 / m;
            a = c + min_inv_width / 2.0;
            b = c - min_inv_width / 2.0;
            if a > inv_near {
                b -= a - inv_near;
                a = inv_near;
            }
            if b < inv_far {
                a += inv_far - b;
                b = inv_far;
            }
            a = a.min(inv_near);
        }
        low[i] = (1.0 / a).clamp(range.d_min, range.d_max);
        high[i] = (1.0 / b).clamp(range.d_min, range.d_max);
        if high[i] <= low[i] {
            // Only reachable if the global range has no room at all.
            low[i] = range.d_min;
            high[i] = range.d_max;
        }
    }
    PixelDepthRange { height, width, low, high }
}

/// Nearest-neighbour 2x upsampling of a visibility map `[h, w]`.
pub fn upsample_visibility<T: Real>(map: &Tensor<T>) -> Result<Tensor<T>> {
    if map.rank() != 2 {
        return Err(Error::shape("upsample_visibility", format!("{:?}", map.shape())));
    }
    map.upsample_nearest(&[2, 2])
}

/// One refinement stage: a thin volume from per-pixel hypotheses, a
/// two-scale U-Net, and a probability head.
#[derive(Debug, Clone)]
pub struct RefineStage {
    pub groups: usize,
    pub depths: usize,
    unet: UNet3d,
    head: Conv,
}

/// Output of one refinement stage.
#[derive(Debug, Clone)]
pub struct StageOutput<T: Real> {
    /// `[D_s, h, w]`.
    pub prob: Tensor<T>,
    /// `[h, w]`.
    pub depth: Tensor<T>,
    pub range: PixelDepthRange,
    /// `[D_s, h, w]`.
    pub hypotheses: Vec<f64>,
}

impl RefineStage {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, groups: usize, depths: usize, channels: &[usize]) -> Result<Self> {
        let unet = UNet3d::new(store, rng, &format!("{name}.unet"), groups, channels)?;
        let head = Conv::new(store, rng, &format!("{name}.head"), ConvSpec::same(unet.out_channels(), 1, 3, 1), 3, true)?;
        Ok(Self { groups, depths, unet, head })
    }

    /// `features` are `[N, C, h, w]` with the reference first; `weights`
    /// are the per-source visibility maps already at this resolution.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        features: &Tensor<T>,
        cameras: &[Camera],
        scale: f64,
        range: PixelDepthRange,
        weights: &[Tensor<T>],
    ) -> Result<StageOutput<T>> {
        let (h, w) = (range.height, range.width);
        if features.rank() != 4 || features.shape()[2..] != [h, w] {
            return Err(Error::shape("stage_forward", format!("features {:?} vs range {h}x{w}", features.shape())));
        }
        let n = features.shape()[0];
        if cameras.len() != n || weights.len() + 1 != n {
            return Err(Error::InvalidArgument(format!(
                "stage_forward: {n} feature maps, {} cameras, {} visibility maps",
                cameras.len(),
                weights.len()
            )));
        }
        let hyps = range.hypotheses(self.depths);
        let reference = features.select(0)?;
        let mut volumes = Vec::with_capacity(n - 1);
        for (i, cam) in cameras.iter().enumerate().skip(1) {
            let rel = crate::geometry::relative_pose(&cameras[0].pose, &cam.pose);
            let grid = build_warp_grid_per_pixel(&cameras[0].intrinsics, &cam.intrinsics, &rel, &hyps, self.depths, h, w, scale);
            let (warped, _) = warp_features(&features.select(i)?, &grid)?;
            volumes.push(group_correlation(&reference, &warped, self.groups)?);
        }
        let agg = aggregate(&volumes, weights)?;
        let y = self.head.forward(ctx, &self.unet.forward(ctx, &agg.volume)?)?;
        let prob = y.reshape(&[self.depths, h, w])?.softmax(0)?;
        let depth = regress_depth_per_pixel(&prob, &hyps)?;
        Ok(StageOutput { prob, depth, range, hypotheses: hyps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_moments() {
        let p = vec![1.0f32 / 3.0; 3];
        let (m, v) = depth_moments(&p, &[1.0, 2.0, 3.0], 3, 1);
        assert!((m[0] - 2.0).abs() < 1e-6);
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn one_hot_range_gets_minimum_width() {
        let r = DepthRange::new(1.0, 4.0).unwrap();
        let mut p = vec![0.0f32; 4];
        p[2] = 1.0;
        let hyps = [1.0, 1.5, 2.0, 4.0];
        let pr = uncertainty_range(&p, &hyps, 4, 1, 1, 1.5, &r, 8, 2.0);
        assert!(pr.low[0] < 2.0 && pr.high[0] > 2.0);
        let want = 2.0 * (1.0 - 0.25) / 7.0;
        assert!((1.0 / pr.low[0] - 1.0 / pr.high[0] - want).abs() < 1e-9);
    }

    #[test]
    fn huge_k_saturates_to_global_range() {
        let r = DepthRange::new(1.0, 4.0).unwrap();
        let p = vec![0.25f32; 4];
        let pr = uncertainty_range(&p, &[1.0, 2.0, 3.0, 4.0], 4, 1, 1, 1e6, &r, 8, 2.0);
        assert_eq!((pr.low[0], pr.high[0]), (1.0, 4.0));
    }
}
