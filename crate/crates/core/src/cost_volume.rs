//! Two-view cost volumes, the per-source visibility network and
//! visibility-weighted aggregation.
//!
//! Volumes are stored channel-major as `[G, D, h, w]` so they feed 3D
//! convolutions directly; visibility volumes are `[D, h, w]` and maps
//! `[h, w]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::WarpGrid;
use crate::nn::{Conv, Ctx};
use crate::tensor::{bilinear_sample, ConvSpec, ParamStore, Real, Tensor};
use crate::unet::UNet3d;

pub const DEFAULT_TAU: f64 = 0.05;

/// Similarity volume between the reference and one source.
#[derive(Debug, Clone)]
pub struct TwoViewCostVolume<T: Real> {
    /// `[G, D, h, w]`.
    pub volume: Tensor<T>,
    /// `[D, h, w]`, false where the warp left the source image.
    pub mask: Vec<bool>,
    pub source: usize,
}

/// Bilinearly warps `src [F, h', w']` to every hypothesis of `grid`,
/// returning `[F, D, h, w]`.
pub fn warp_features<T: Real>(src: &Tensor<T>, grid: &WarpGrid) -> Result<(Tensor<T>, Vec<bool>)> {
    let (warped, valid) = bilinear_sample(src, &grid.sampling_coords::<T>())?;
    let f = src.shape()[0];
    let warped = warped.reshape(&[f, grid.depths, grid.height, grid.width])?;
    let mask = valid.iter().zip(&grid.valid).map(|(&a, &b)| a && b).collect();
    Ok((warped, mask))
}

/// Group-wise correlation: channel group `g` of the output is the mean over
/// that group's `F/G` channels of `reference * warped`, for each depth.
/// `reference` is `[F, h, w]`, `warped` is `[F, D, h, w]`.
pub fn group_correlation<T: Real>(reference: &Tensor<T>, warped: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    if reference.rank() != 3 || warped.rank() != 4 {
        return Err(Error::shape(
            "group_correlation",
            format!("reference {:?}, warped {:?}", reference.shape(), warped.shape()),
        ));
    }
    let (f, h, w) = (reference.shape()[0], reference.shape()[1], reference.shape()[2]);
    let d = warped.shape()[1];
    if warped.shape() != [f, d, h, w] {
        return Err(Error::shape(
            "group_correlation",
            format!("reference {:?} does not match warped {:?}", reference.shape(), warped.shape()),
        ));
    }
    if groups == 0 || f % groups != 0 {
        return Err(Error::InvalidArgument(format!("{groups} groups do not divide {f} channels")));
    }
    let per = f / groups;
    let hw = h * w;
    let scale = T::one() / T::lit(per as f64);
    let (r, x) = (reference.data(), warped.data());
    let mut out = vec![T::zero(); groups * d * hw];
    for g in 0..groups {
        for c in g * per..(g + 1) * per {
            let rc = &r[c * hw..(c + 1) * hw];
            for j in 0..d {
                let xc = &x[(c * d + j) * hw..(c * d + j + 1) * hw];
                let o = &mut out[(g * d + j) * hw..(g * d + j + 1) * hw];
                for i in 0..hw {
                    o[i] += rc[i] * xc[i];
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    Ok(Tensor::from_op(
        "group_correlation",
        vec![groups, d, h, w],
        out,
        vec![reference.clone(), warped.clone()],
        Box::new(move |gout, _, parents| {
            let (r, x) = (parents[0].data(), parents[1].data());
            let mut gr = vec![T::zero(); r.len()];
            let mut gx = vec![T::zero(); x.len()];
            for g in 0..groups {
                for c in g * per..(g + 1) * per {
                    for j in 0..d {
                        let go = &gout[(g * d + j) * hw..(g * d + j + 1) * hw];
                        let base = (c * d + j) * hw;
                        for i in 0..hw {
                            let s = go[i] * scale;
                            gr[c * hw + i] += s * x[base + i];
                            gx[base + i] = s * r[c * hw + i];
                        }
                    }
                }
            }
            vec![Some(gr), Some(gx)]
        }),
    ))
}

/// Warps `src` by `grid` and correlates it with `reference` in `groups`
/// channel groups. Invalid warps produce zero similarity.
pub fn build_two_view_volume<T: Real>(
    reference: &Tensor<T>,
    src: &Tensor<T>,
    grid: &WarpGrid,
    groups: usize,
    source: usize,
) -> Result<TwoViewCostVolume<T>> {
    if reference.rank() != 3 || src.rank() != 3 || reference.shape()[0] != src.shape()[0] {
        return Err(Error::shape(
            "build_two_view_volume",
            format!("reference {:?}, source {:?}", reference.shape(), src.shape()),
        ));
    }
    if reference.shape()[1..] != [grid.height, grid.width] {
        return Err(Error::shape(
            "build_two_view_volume",
            format!("grid {}x{} vs reference {:?}", grid.height, grid.width, reference.shape()),
        ));
    }
    let f = reference.shape()[0];
    if groups == 0 || f % groups != 0 {
        return Err(Error::InvalidArgument(format!("{groups} groups do not divide {f} channels")));
    }
    let (warped, mask) = warp_features(src, grid)?;
    let volume = group_correlation(reference, &warped, groups)?;
    Ok(TwoViewCostVolume { volume, mask, source })
}

/// Three-scale 3D U-Net followed by a one-channel convolution and sigmoid,
/// mapping a two-view volume to per-depth visibility probabilities.
#[derive(Debug, Clone)]
pub struct VisibilityNet {
    unet: UNet3d,
    head: Conv,
}

impl VisibilityNet {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, groups: usize, channels: &[usize]) -> Result<Self> {
        let unet = UNet3d::new(store, rng, &format!("{name}.unet"), groups, channels)?;
        let head = Conv::new(store, rng, &format!("{name}.head"), ConvSpec::same(unet.out_channels(), 1, 3, 1), 3, true)?;
        Ok(Self { unet, head })
    }

    /// `volumes` is `[G, D, h, w]` or a batch `[B, G, D, h, w]`; the result
    /// drops the channel axis: `[D, h, w]` or `[B, D, h, w]`.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, volumes: &Tensor<T>) -> Result<Tensor<T>> {
        let r = volumes.rank();
        if r != 4 && r != 5 {
            return Err(Error::shape("visibility_net", format!("input {:?}", volumes.shape())));
        }
        self.unet.check_input("visibility_net", &volumes.shape()[r - 3..])?;
        let y = self.head.forward(ctx, &self.unet.forward(ctx, volumes)?)?;
        let mut shape = volumes.shape().to_vec();
        shape.remove(r - 4);
        y.reshape(&shape).map(|t| t.sigmoid())
    }
}

/// `V(p) = max_j P_v(j, p)` over a `[D, h, w]` visibility volume.
pub fn visibility_map<T: Real>(pv: &Tensor<T>) -> Result<Tensor<T>> {
    if pv.rank() != 3 {
        return Err(Error::shape("visibility_map", format!("expected [D,h,w], got {:?}", pv.shape())));
    }
    Ok(pv.max_axis(0)?.0)
}

/// `V'(p) = V(p)` if `V(p) > tau`, else 0.
pub fn truncate_visibility<T: Real>(raw: &Tensor<T>, tau: f64) -> Tensor<T> {
    raw.threshold(tau)
}

/// Visibility-weighted mean of two-view volumes.
#[derive(Debug, Clone)]
pub struct AggregatedCostVolume<T: Real> {
    /// `[G, D, h, w]`.
    pub volume: Tensor<T>,
    /// `[h, w]` sum of the source weights.
    pub total_weight: Vec<T>,
}

/// `C(p) = sum_i V_i(p) C_i(p) / sum_i V_i(p)` at every pixel, over all
/// channels and depths; pixels whose weights sum to zero take the
/// unweighted mean of the volumes. Sources are summed in list order.
pub fn aggregate<T: Real>(volumes: &[Tensor<T>], weights: &[Tensor<T>]) -> Result<AggregatedCostVolume<T>> {
    let Some(first) = volumes.first() else {
        return Err(Error::InvalidArgument("aggregate: no source volumes".into()));
    };
    if volumes.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "aggregate: {} volumes but {} visibility maps",
            volumes.len(),
            weights.len()
        )));
    }
    let shape = first.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("aggregate", format!("volume {shape:?} is not [G,D,h,w]")));
    }
    let (gd, hw) = (shape[0] * shape[1], shape[2] * shape[3]);
    for (v, m) in volumes.iter().zip(weights) {
        if v.shape() != shape.as_slice() || m.shape() != &shape[2..] {
            return Err(Error::shape(
                "aggregate",
                format!("volume {:?} / map {:?} vs {:?}", v.shape(), m.shape(), shape),
            ));
        }
    }
    let n = volumes.len();
    let mut total = vec![T::zero(); hw];
    for m in weights {
        for (t, &v) in total.iter_mut().zip(m.data()) {
            *t += v;
        }
    }
    let fallback = T::one() / T::lit(n as f64);
    // Effective per-source, per-pixel coefficient.
    let coef: Vec<Vec<T>> = weights
        .iter()
        .map(|m| {
            m.data()
                .iter()
                .zip(&total)
                .map(|(&v, &t)| if t > T::zero() { v / t } else { fallback })
                .collect()
        })
        .collect();
    let mut out = vec![T::zero(); gd * hw];
    for (v, c) in volumes.iter().zip(&coef) {
        let vd = v.data();
        for k in 0..gd {
            let (o, s) = (&mut out[k * hw..(k + 1) * hw], &vd[k * hw..(k + 1) * hw]);
            for i in 0..hw {
                o[i] += c[i] * s[i];
            }
        }
    }
    let mut parents: Vec<Tensor<T>> = volumes.to_vec();
    parents.extend(weights.iter().cloned());
    let totals = total.clone();
    let volume = Tensor::from_op(
        "aggregate",
        shape,
        out,
        parents,
        Box::new(move |g, agg, parents| {
            let mut grads = Vec::with_capacity(2 * n);
            for (v, c) in parents[..n].iter().zip(&coef) {
                if !v.requires_grad() {
                    grads.push(None);
                    continue;
                }
                let mut gv = vec![T::zero(); gd * hw];
                for k in 0..gd {
                    for i in 0..hw {
                        gv[k * hw + i] = g[k * hw + i] * c[i];
                    }
                }
                grads.push(Some(gv));
            }
            for v in &parents[..n] {
                let vd = v.data();
                let mut gm = vec![T::zero(); hw];
                for i in 0..hw {
                    let t = totals[i];
                    if t <= T::zero() {
                        continue;
                    }
                    let mut s = T::zero();
                    for k in 0..gd {
                        s += g[k * hw + i] * (vd[k * hw + i] - agg[k * hw + i]);
                    }
                    gm[i] = s / t;
                }
                grads.push(Some(gm));
            }
            grads
        }),
    );
    Ok(AggregatedCostVolume { volume, total_weight: total })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_correlation_is_mean_square() {
        let f: Vec<f64> = (0..4 * 2 * 3).map(|i| (i as f64 * 0.3).cos()).collect();
        let r = Tensor::from_vec(&[4, 2, 3], f.clone()).unwrap();
        let mut wv = Vec::new();
        for c in 0..4 {
            wv.extend_from_slice(&f[c * 6..(c + 1) * 6]);
        }
        let warped = Tensor::from_vec(&[4, 1, 2, 3], wv).unwrap();
        let c = group_correlation(&r, &warped, 2).unwrap();
        assert_eq!(c.shape(), &[2, 1, 2, 3]);
        for i in 0..6 {
            let want = (f[i].powi(2) + f[6 + i].powi(2)) / 2.0;
            assert!((c.data()[i] - want).abs() < 1e-12);
        }
        assert!(group_correlation(&r, &warped, 3).is_err());
    }

    #[test]
    fn zero_weight_falls_back_to_mean() {
        let a = Tensor::<f64>::full(&[1, 1, 1, 2], 1.0);
        let b = Tensor::<f64>::full(&[1, 1, 1, 2], 3.0);
        let wa = Tensor::from_vec(&[1, 2], vec![0.0, 0.25]).unwrap();
        let wb = Tensor::from_vec(&[1, 2], vec![0.0, 0.75]).unwrap();
        let agg = aggregate(&[a, b], &[wa, wb]).unwrap();
        assert_eq!(agg.volume.data(), &[2.0, 2.5]);
        assert!(aggregate::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn truncation_is_strict() {
        let v = Tensor::<f64>::from_vec(&[3], vec![0.03, DEFAULT_TAU, 0.5]).unwrap();
        assert_eq!(truncate_visibility(&v, DEFAULT_TAU).data(), &[0.0, 0.0, 0.5]);
    }
}
