//! Parameterized layers shared by all networks.
//!
//! Layers own only names and hyper-parameters; values live in a
//! [`ParamStore`], so one network description runs in `f32` for training
//! and in `f64` for gradient checks.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{batch_norm, conv2d, conv3d, ConvSpec, NormMode, ParamStore, Real, Tensor};

/// Parameter values plus the normalization mode of one forward pass.
#[derive(Clone, Copy)]
pub struct Ctx<'a, T: Real> {
    pub store: &'a ParamStore<T>,
    pub mode: NormMode,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn train(store: &'a ParamStore<T>) -> Self {
        Self { store, mode: NormMode::Train }
    }

    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self { store, mode: NormMode::Eval }
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    name: String,
    pub spec: ConvSpec,
    rank: usize,
    bias: bool,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        spec: ConvSpec,
        rank: usize,
        bias: bool,
    ) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_channels * spec.kernel.pow(rank as u32);
        store.insert_he(format!("{name}.weight"), &spec.weight_shape(rank), fan_in, rng)?;
        if bias {
            store.insert(format!("{name}.bias"), &[spec.out_channels], vec![0.0; spec.out_channels])?;
        }
        Ok(Self { name: name.to_string(), spec, rank, bias })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = ctx.store.get(&format!("{}.weight", self.name))?;
        let b = if self.bias { Some(ctx.store.get(&format!("{}.bias", self.name))?) } else { None };
        match self.rank {
            2 => conv2d(x, &self.spec, w, b),
            _ => conv3d(x, &self.spec, w, b),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    name: String,
    rank: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rank: usize) -> Result<Self> {
        store.insert(format!("{name}.gamma"), &[channels], vec![1.0; channels])?;
        store.insert(format!("{name}.beta"), &[channels], vec![0.0; channels])?;
        store.insert_stats(name, channels);
        Ok(Self { name: name.to_string(), rank })
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let gamma = ctx.store.get(&format!("{}.gamma", self.name))?;
        let beta = ctx.store.get(&format!("{}.beta", self.name))?;
        let stats = ctx.store.stats(&self.name)?;
        let batched = x.rank() == self.rank + 2;
        batch_norm(x, gamma, beta, stats, ctx.mode, batched)
    }
}

/// Convolution -> batch norm -> optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    conv: Conv,
    bn: BatchNorm,
    relu: bool,
}

impl ConvBn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        spec: ConvSpec,
        rank: usize,
        relu: bool,
    ) -> Result<Self> {
        let conv = Conv::new(store, rng, &format!("{name}.conv"), spec, rank, false)?;
        let bn = BatchNorm::new(store, &format!("{name}.bn"), spec.out_channels, rank)?;
        Ok(Self { conv, bn, relu })
    }

    pub fn relu(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        spec: ConvSpec,
        rank: usize,
    ) -> Result<Self> {
        Self::new(store, rng, name, spec, rank, true)
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.bn.forward(ctx, &self.conv.forward(ctx, x)?)?;
        Ok(if self.relu { y.relu() } else { y })
    }

    pub fn out_channels(&self) -> usize {
        self.conv.spec.out_channels
    }
}
