use std::cell::RefCell;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics only.
    Eval,
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Debug, Clone)]
pub struct RunningStats<T: Real> {
    pub mean: RefCell<Vec<T>>,
    pub var: RefCell<Vec<T>>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: RefCell::new(vec![T::zero(); channels]),
            var: RefCell::new(vec![T::one(); channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.borrow().len()
    }
}

/// Batch normalization over `[C, ..]` or `[B, C, ..]` with affine scale and
/// shift. Statistics are taken per channel over batch and spatial axes.
pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
    mode: NormMode,
    batched: bool,
) -> Result<Tensor<T>> {
    let cdim = usize::from(batched);
    if x.rank() < cdim + 1 {
        return Err(Error::shape("batch_norm", format!("input {:?}", x.shape())));
    }
    let c = x.shape()[cdim];
    if gamma.shape() != [c] || beta.shape() != [c] || stats.channels() != c {
        return Err(Error::shape(
            "batch_norm",
            format!("{} channels but affine {:?}/{:?}", c, gamma.shape(), beta.shape()),
        ));
    }
    let batch = if batched { x.shape()[0] } else { 1 };
    let inner: usize = x.shape()[cdim + 1..].iter().product();
    let count = batch * inner;
    let eps = T::lit(BN_EPS);
    let xd = x.data();
    let slot = move |b: usize, ch: usize| (b * c + ch) * inner;

    let (mean, inv_std): (Vec<T>, Vec<T>) = match mode {
        NormMode::Train => {
            let n = T::lit(count as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..batch {
                    s += xd[slot(b, ch)..slot(b, ch) + inner].iter().copied().sum::<T>();
                }
                let m = s / n;
                let mut v = T::zero();
                for b in 0..batch {
                    v += xd[slot(b, ch)..slot(b, ch) + inner]
                        .iter()
                        .map(|&e| (e - m) * (e - m))
                        .sum::<T>();
                }
                mean[ch] = m;
                var[ch] = v / n;
            }
            let mom = T::lit(BN_MOMENTUM);
            let unbias = if count > 1 { n / (n - T::one()) } else { T::one() };
            let mut rm = stats.mean.borrow_mut();
            let mut rv = stats.var.borrow_mut();
            for ch in 0..c {
                rm[ch] = (T::one() - mom) * rm[ch] + mom * mean[ch];
                rv[ch] = (T::one() - mom) * rv[ch] + mom * var[ch] * unbias;
            }
            let inv = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, inv)
        }
        NormMode::Eval => {
            let rm = stats.mean.borrow().clone();
            let inv = stats.var.borrow().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (rm, inv)
        }
    };

    let gd = gamma.data();
    let bd = beta.data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..batch {
        for ch in 0..c {
            let s = slot(b, ch);
            for i in s..s + inner {
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = gd[ch] * h + bd[ch];
            }
        }
    }

    Ok(Tensor::from_op(
        "batch_norm",
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, _, parents| {
            let gd = parents[1].data();
            let mut gx = vec![T::zero(); g.len()];
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            for ch in 0..c {
                let mut sum_g = T::zero();
                let mut sum_gh = T::zero();
                for b in 0..batch {
                    let s = slot(b, ch);
                    for i in s..s + inner {
                        sum_g += g[i];
                        sum_gh += g[i] * xhat[i];
                    }
                }
                ggamma[ch] = sum_gh;
                gbeta[ch] = sum_g;
                let scale = gd[ch] * inv_std[ch];
                match mode {
                    NormMode::Train => {
                        let n = T::lit(count as f64);
                        let (mg, mgh) = (sum_g / n, sum_gh / n);
                        for b in 0..batch {
                            let s = slot(b, ch);
                            for i in s..s + inner {
                                gx[i] = scale * (g[i] - mg - xhat[i] * mgh);
                            }
                        }
                    }
                    NormMode::Eval => {
                        for b in 0..batch {
                            let s = slot(b, ch);
                            for i in s..s + inner {
                                gx[i] = scale * g[i];
                            }
                        }
                    }
                }
            }
            vec![Some(gx), Some(ggamma), Some(gbeta)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::full(&[c], 1.0), Tensor::zeros(&[c]))
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor::<f64>::full(&[2, 3, 3], 4.2);
        let (g, b) = affine(2);
        let stats = RunningStats::new(2);
        let y = batch_norm(&x, &g, &b, &stats, NormMode::Train, false).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));
        // Running mean moved 10% towards 4.2.
        assert!((stats.mean.borrow()[0] - 0.42).abs() < 1e-12);
    }

    #[test]
    fn standardized_input_is_nearly_unchanged() {
        let x = Tensor::<f64>::from_vec(&[1, 4], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let (g, b) = affine(1);
        let y = batch_norm(&x, &g, &b, &RunningStats::new(1), NormMode::Train, false).unwrap();
        for (a, e) in y.data().iter().zip(x.data()) {
            assert!((a - e).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = Tensor::<f64>::from_vec(&[1, 2], vec![3.0, 5.0]).unwrap();
        let (g, b) = affine(1);
        let stats = RunningStats::new(1);
        *stats.mean.borrow_mut() = vec![1.0];
        *stats.var.borrow_mut() = vec![4.0];
        let y = batch_norm(&x, &g, &b, &stats, NormMode::Eval, false).unwrap();
        let s = (4.0 + BN_EPS).sqrt();
        assert!((y.data()[0] - 2.0 / s).abs() < 1e-12);
        assert!((y.data()[1] - 4.0 / s).abs() < 1e-12);
    }
}
