//! Cost-volume filtering (a 3D ResNet and two stacked U-Nets), depth
//! regression in inverse-depth space and the L1 training losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DepthRange;
use crate::nn::{Conv, ConvBn, Ctx};
use crate::tensor::{ConvSpec, ParamStore, Real, Tensor};
use crate::unet::UNet3d;

/// Per-term weights of the depth losses; index `l` weighs prediction `l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(pub [f64; 5]);

impl Default for LossWeights {
    fn default() -> Self {
        Self([0.5, 0.5, 0.7, 0.7, 0.7])
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("loss weights must be nonnegative, got {:?}", self.0)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    pub channels: usize,
    pub residual_blocks: usize,
    /// Widths of the two stacked U-Nets, one entry per scale.
    pub unet_channels: Vec<usize>,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self { channels: 8, residual_blocks: 4, unet_channels: vec![8, 16] }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    a: ConvBn,
    b: ConvBn,
}

/// Stacked filtering: stem, residual blocks, then two U-Nets. Each of the
/// three modules ends in a one-channel head whose logits become a
/// probability volume.
#[derive(Debug, Clone)]
pub struct Regularizer {
    stem: ConvBn,
    blocks: Vec<ResBlock>,
    unets: Vec<UNet3d>,
    heads: Vec<Conv>,
}

impl Regularizer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, groups: usize, cfg: &RegularizerConfig) -> Result<Self> {
        let c = cfg.channels;
        if cfg.unet_channels.first() != Some(&c) {
            return Err(Error::Config(format!(
                "regularizer: u-net widths {:?} must start at {c}",
                cfg.unet_channels
            )));
        }
        let stem = ConvBn::relu(store, rng, &format!("{name}.stem"), ConvSpec::same(groups, c, 3, 1), 3)?;
        let blocks = (0..cfg.residual_blocks)
            .map(|i| {
                Ok(ResBlock {
                    a: ConvBn::relu(store, rng, &format!("{name}.res{i}.a"), ConvSpec::same(c, c, 3, 1), 3)?,
                    b: ConvBn::new(store, rng, &format!("{name}.res{i}.b"), ConvSpec::same(c, c, 3, 1), 3, false)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let unets = (0..2)
            .map(|i| UNet3d::new(store, rng, &format!("{name}.unet{i}"), c, &cfg.unet_channels))
            .collect::<Result<Vec<_>>>()?;
        let heads = (0..3)
            .map(|i| Conv::new(store, rng, &format!("{name}.head{i}"), ConvSpec::same(c, 1, 3, 1), 3, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stem, blocks, unets, heads })
    }

    /// Runs the residual block stack only (one regularization module).
    pub fn residual_stage<T: Real>(&self, ctx: &Ctx<'_, T>, volume: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = self.stem.forward(ctx, volume)?;
        for b in &self.blocks {
            let y = b.b.forward(ctx, &b.a.forward(ctx, &x)?)?;
            x = x.add(&y)?.relu();
        }
        Ok(x)
    }

    /// `volume [G, D, h, w]` to three probability volumes `[D, h, w]`,
    /// each softmax-normalized over depth.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, volume: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if volume.rank() != 4 {
            return Err(Error::shape("filter_cost_volume", format!("expected [G,D,h,w], got {:?}", volume.shape())));
        }
        self.unets[0].check_input("filter_cost_volume", &volume.shape()[1..])?;
        let sp = volume.shape()[1..].to_vec();
        let head = |i: usize, x: &Tensor<T>| -> Result<Tensor<T>> {
            self.heads[i].forward(ctx, x)?.reshape(&sp)?.softmax(0)
        };
        let mut x = self.residual_stage(ctx, volume)?;
        let mut probs = vec![head(0, &x)?];
        for (i, u) in self.unets.iter().enumerate() {
            x = u.forward(ctx, &x)?.add(&x)?;
            probs.push(head(i + 1, &x)?);
        }
        Ok(probs)
    }
}

/// Depth of a (fractional) hypothesis ordinal under inverse-depth sampling.
pub fn ordinal_to_depth(ordinal: f64, range: &DepthRange, count: usize) -> f64 {
    let (a, b) = (1.0 / range.d_min, 1.0 / range.d_max);
    1.0 / (a - (a - b) * ordinal / (count - 1) as f64)
}

/// Expected ordinal `sum_j j P(j, p)` of a `[D, h, w]` probability volume.
pub fn expected_ordinal<T: Real>(prob: &Tensor<T>) -> Result<Tensor<T>> {
    if prob.rank() != 3 {
        return Err(Error::shape("expected_ordinal", format!("{:?}", prob.shape())));
    }
    let (d, hw) = (prob.shape()[0], prob.shape()[1] * prob.shape()[2]);
    let idx: Vec<T> = (0..d).flat_map(|j| std::iter::repeat_n(T::lit(j as f64), hw)).collect();
    let idx = Tensor::from_vec(prob.shape(), idx)?;
    prob.mul(&idx)?.sum_axis(0)
}

/// Inverse-depth regression: the expected ordinal mapped back to depth so
/// that ordinal 0 is `d_min` and ordinal `D-1` is `d_max`. Returns `[h, w]`.
pub fn regress_depth<T: Real>(prob: &Tensor<T>, range: &DepthRange) -> Result<Tensor<T>> {
    let d = prob.shape().first().copied().unwrap_or(0);
    if d < 2 {
        return Err(Error::shape("regress_depth", format!("{:?}", prob.shape())));
    }
    let ord = expected_ordinal(prob)?;
    let (a, b) = (1.0 / range.d_min, 1.0 / range.d_max);
    let slope = (a - b) / (d - 1) as f64;
    let inv: Vec<T> = ord.data().iter().map(|&o| T::one() / (T::lit(a) - T::lit(slope) * o)).collect();
    // d depth / d ordinal = slope * depth^2
    Ok(Tensor::from_op(
        "inverse_depth",
        ord.shape().to_vec(),
        inv,
        vec![ord],
        Box::new(move |g, y, _| {
            vec![Some(g.iter().zip(y).map(|(&gi, &yi)| gi * T::lit(slope) * yi * yi).collect())]
        }),
    ))
}

/// Per-pixel expectation `sum_j P(j, p) d_j(p)` over pixel-specific
/// hypotheses `[D, h, w]`.
pub fn regress_depth_per_pixel<T: Real>(prob: &Tensor<T>, hypotheses: &[f64]) -> Result<Tensor<T>> {
    if hypotheses.len() != prob.numel() || prob.rank() != 3 {
        return Err(Error::shape(
            "regress_depth_per_pixel",
            format!("prob {:?} vs {} hypotheses", prob.shape(), hypotheses.len()),
        ));
    }
    let h = Tensor::from_vec(prob.shape(), hypotheses.iter().map(|&v| T::lit(v)).collect())?;
    prob.mul(&h)?.sum_axis(0)
}

/// Mean absolute error over masked pixels, differentiable in `pred`.
pub fn masked_l1<T: Real>(pred: &Tensor<T>, gt: &[f32], mask: &[bool]) -> Result<Tensor<T>> {
    if pred.numel() != gt.len() || gt.len() != mask.len() {
        return Err(Error::shape(
            "masked_l1",
            format!("pred {:?}, gt {}, mask {}", pred.shape(), gt.len(), mask.len()),
        ));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::InvalidArgument("masked_l1: empty mask".into()));
    }
    let g = Tensor::from_vec(pred.shape(), gt.iter().map(|&v| T::lit(v as f64)).collect())?;
    let m = Tensor::from_vec(pred.shape(), mask.iter().map(|&b| if b { T::one() } else { T::zero() }).collect())?;
    Ok(pred.sub(&g)?.abs().mul(&m)?.sum().mul_scalar(1.0 / count as f64))
}

/// Ground truth and validity at one resolution.
#[derive(Debug, Clone, Copy)]
pub struct DepthTarget<'a> {
    pub depth: &'a [f32],
    pub mask: &'a [bool],
}

/// `sum_l lambda_l * mean_{mask} |pred_l - gt|` over the three
/// low-resolution predictions.
pub fn loss_low_res<T: Real>(preds: &[Tensor<T>], gt: DepthTarget<'_>, weights: &LossWeights) -> Result<Tensor<T>> {
    if preds.len() != 3 {
        return Err(Error::InvalidArgument(format!("expected 3 predictions, got {}", preds.len())));
    }
    let mut total: Option<Tensor<T>> = None;
    for (l, p) in preds.iter().enumerate() {
        let term = masked_l1(p, gt.depth, gt.mask)?.mul_scalar(weights.0[l]);
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("three terms"))
}

/// Low-resolution loss plus the two refinement-stage terms.
pub fn loss_high_res<T: Real>(
    preds: &[Tensor<T>],
    gts: [DepthTarget<'_>; 3],
    weights: &LossWeights,
) -> Result<Tensor<T>> {
    if preds.len() != 5 {
        return Err(Error::InvalidArgument(format!("expected 5 predictions, got {}", preds.len())));
    }
    let low = loss_low_res(&preds[..3], gts[0], weights)?;
    let t3 = masked_l1(&preds[3], gts[1].depth, gts[1].mask)?.mul_scalar(weights.0[3]);
    let t4 = masked_l1(&preds[4], gts[2].depth, gts[2].mask)?.mul_scalar(weights.0[4]);
    low.add(&t3)?.add(&t4)
}

/// Probability mass on the four hypotheses nearest the expected ordinal
/// (window kept inside `[0, D-1]`). `prob` is `[D, h, w]` row-major.
pub fn photometric_confidence(prob: &[f32], depths: usize, hw: usize) -> Vec<f32> {
    let win = depths.min(4);
    (0..hw)
        .map(|i| {
            let ord: f64 = (0..depths).map(|j| j as f64 * prob[j * hw + i] as f64).sum();
            let start = (ord.floor() as isize - 1).clamp(0, (depths - win) as isize) as usize;
            (start..start + win).map(|j| prob[j * hw + i]).sum::<f32>().clamp(0.0, 1.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(d: usize, j: usize) -> Tensor<f64> {
        let mut v = vec![0.0; d];
        v[j] = 1.0;
        Tensor::from_vec(&[d, 1, 1], v).unwrap()
    }

    #[test]
    fn regression_endpoints() {
        let r = DepthRange::new(1.0, 2.0).unwrap();
        assert!((regress_depth(&one_hot(5, 0), &r).unwrap().item() - 1.0).abs() < 1e-12);
        assert!((regress_depth(&one_hot(5, 4), &r).unwrap().item() - 2.0).abs() < 1e-12);
        let uni = Tensor::<f64>::full(&[3, 1, 1], 1.0 / 3.0);
        assert!((regress_depth(&uni, &r).unwrap().item() - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn confidence_examples() {
        let mut p = vec![0.0f32; 32];
        p[7] = 1.0;
        assert_eq!(photometric_confidence(&p, 32, 1), vec![1.0]);
        let u = vec![1.0 / 32.0; 32];
        assert!((photometric_confidence(&u, 32, 1)[0] - 0.125).abs() < 1e-6);
    }

    #[test]
    fn single_pixel_loss_is_offset() {
        let pred = Tensor::<f64>::from_vec(&[1, 2], vec![1.5, 9.0]).unwrap();
        let l = masked_l1(&pred, &[1.0, 0.0], &[true, false]).unwrap();
        assert!((l.item() - 0.5).abs() < 1e-12);
        assert!(masked_l1(&pred, &[1.0, 0.0], &[false, false]).is_err());
    }
}
