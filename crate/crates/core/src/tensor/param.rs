use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, RunningStats, Tensor};
use crate::error::{Error, Result};

/// Named trainable leaves plus normalization running statistics.
///
/// Keys are kept sorted so iteration order (and therefore optimizer updates
/// and checkpoint layout) is deterministic.
#[derive(Debug)]
pub struct ParamStore<T: Real = f32> {
    params: BTreeMap<String, Tensor<T>>,
    stats: BTreeMap<String, RunningStats<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new(), stats: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, Tensor::param(shape, data)?);
        Ok(())
    }

    /// He-normal initialization for a layer with `fan_in` inputs.
    pub fn insert_he(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<()> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
        self.insert(name, shape, data)
    }

    pub fn insert_stats(&mut self, name: impl Into<String>, channels: usize) {
        self.stats.insert(name.into(), RunningStats::new(channels));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn stats(&self, name: &str) -> Result<&RunningStats<T>> {
        self.stats
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown running stats {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn stats_iter(&self) -> impl Iterator<Item = (&String, &RunningStats<T>)> {
        self.stats.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Replaces a parameter's values with a fresh leaf (gradient cleared).
    pub fn set(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        *slot = Tensor::param(&slot.shape().to_vec(), data)?;
        Ok(())
    }

    pub fn set_stats(&mut self, name: &str, mean: Vec<T>, var: Vec<T>) -> Result<()> {
        let s = self.stats(name)?;
        if mean.len() != s.channels() || var.len() != s.channels() {
            return Err(Error::shape("set_stats", format!("{} channels", s.channels())));
        }
        *s.mean.borrow_mut() = mean;
        *s.var.borrow_mut() = var;
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.params.values().for_each(Tensor::zero_grad);
    }

    /// Current gradient of every parameter (zeros where none arrived).
    pub fn grads(&self) -> BTreeMap<String, Vec<T>> {
        self.params
            .iter()
            .map(|(k, t)| (k.clone(), t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()])))
            .collect()
    }

    /// Deep copy with converted element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::lit(x.as_f64())).collect::<Vec<U>>();
        let params = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::param(t.shape(), conv(t.data())).expect("same shape")))
            .collect();
        let stats = self
            .stats
            .iter()
            .map(|(k, s)| {
                let r = RunningStats::new(s.channels());
                *r.mean.borrow_mut() = conv(&s.mean.borrow());
                *r.var.borrow_mut() = conv(&s.var.borrow());
                (k.clone(), r)
            })
            .collect();
        ParamStore { params, stats }
    }

    /// Bitwise copy of all values (used for best-checkpoint snapshots).
    pub fn snapshot(&self) -> ParamStore<T> {
        self.cast()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn set_replaces_leaf_and_clears_grad() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", &[2], vec![1.0, 2.0]).unwrap();
        s.get("w").unwrap().sum().backward().unwrap();
        assert!(s.get("w").unwrap().grad().is_some());
        s.set("w", vec![3.0, 4.0]).unwrap();
        assert!(s.get("w").unwrap().grad().is_none());
        assert_eq!(s.get("w").unwrap().data(), &[3.0, 4.0]);
        assert!(s.insert("w", &[1], vec![0.0]).is_err());
    }

    #[test]
    fn he_init_is_seeded() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        let mut ra = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut rb = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        a.insert_he("k", &[4, 2, 3, 3], 18, &mut ra).unwrap();
        b.insert_he("k", &[4, 2, 3, 3], 18, &mut rb).unwrap();
        assert_eq!(a.get("k").unwrap().data(), b.get("k").unwrap().data());
    }
}
