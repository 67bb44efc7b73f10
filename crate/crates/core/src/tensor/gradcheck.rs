//! Central finite differences for checking analytic gradients in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Step and probe budget of a check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub eps: f64,
    /// Coordinates probed per tensor; all of them when the tensor is smaller.
    pub probes: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { eps: 1e-6, probes: 24, seed: 0 }
    }
}

/// Largest elementwise `|a - n| / max(|a|, |n|, floor)`, with the floor at
/// 1e-3 of the largest numeric magnitude so near-zero entries compare
/// absolutely.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-10);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Scalar projection `sum(out * r)` with fixed pseudo-random `r` in
/// `[0.5, 1.5)`, so every output element contributes to the gradient.
pub fn project(out: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r: Vec<f64> = (0..out.numel()).map(|_| rng.random_range(0.5..1.5)).collect();
    out.mul(&Tensor::from_vec(out.shape(), r)?).map(|t| t.sum())
}

impl GradCheck {
    fn indices(&self, n: usize, salt: u64) -> Vec<usize> {
        if n <= self.probes {
            return (0..n).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(31).wrapping_add(salt));
        let mut idx = sample(&mut rng, n, self.probes).into_vec();
        idx.sort_unstable();
        idx
    }

    fn central(&self, x: &[f64], i: usize, f: &mut impl FnMut(&[f64]) -> Result<f64>) -> Result<f64> {
        let mut p = x.to_vec();
        p[i] = x[i] + self.eps;
        let hi = f(&p)?;
        p[i] = x[i] - self.eps;
        let lo = f(&p)?;
        Ok((hi - lo) / (2.0 * self.eps))
    }

    /// Relative error of the gradient of scalar `f` with respect to every
    /// input tensor, over the probed coordinates.
    pub fn inputs(&self, inputs: &[Tensor<f64>], f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>) -> Result<f64> {
        let leaves: Vec<Tensor<f64>> =
            inputs.iter().map(|t| Tensor::param(t.shape(), t.to_vec())).collect::<Result<_>>()?;
        let out = f(&leaves)?;
        scalar_check(&out)?;
        out.backward()?;
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for (k, leaf) in leaves.iter().enumerate() {
            let grad = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
            let base = leaf.to_vec();
            let mut eval = |x: &[f64]| -> Result<f64> {
                let mut args: Vec<Tensor<f64>> = inputs.to_vec();
                args[k] = Tensor::from_vec(leaf.shape(), x.to_vec())?;
                Ok(f(&args)?.item())
            };
            for i in self.indices(base.len(), k as u64) {
                analytic.push(grad[i]);
                numeric.push(self.central(&base, i, &mut eval)?);
            }
        }
        Ok(relative_error(&analytic, &numeric))
    }

    /// Relative error of the gradient of scalar `f` with respect to the
    /// named parameters of `store`.
    pub fn params(
        &self,
        store: &mut ParamStore<f64>,
        names: &[&str],
        f: impl Fn(&ParamStore<f64>) -> Result<Tensor<f64>>,
    ) -> Result<f64> {
        store.zero_grad();
        let out = f(store)?;
        scalar_check(&out)?;
        out.backward()?;
        let grads = store.grads();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for (k, &name) in names.iter().enumerate() {
            let base = store.get(name)?.to_vec();
            let grad = &grads[name];
            for i in self.indices(base.len(), 1000 + k as u64) {
                let mut p = base.clone();
                p[i] = base[i] + self.eps;
                store.set(name, p.clone())?;
                let hi = f(store)?.item();
                p[i] = base[i] - self.eps;
                store.set(name, p)?;
                let lo = f(store)?.item();
                analytic.push(grad[i]);
                numeric.push((hi - lo) / (2.0 * self.eps));
            }
            store.set(name, base)?;
        }
        Ok(relative_error(&analytic, &numeric))
    }
}

fn scalar_check(out: &Tensor<f64>) -> Result<()> {
    if out.numel() != 1 {
        return Err(Error::shape("gradcheck", format!("expected a scalar, got {:?}", out.shape())));
    }
    Ok(())
}
