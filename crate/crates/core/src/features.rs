//! Shared 2D image encoder.
//!
//! Eight 3x3 convolutions take `[3, H, W]` to `[F, H/4, W/4]`. In cascade
//! mode two decoder heads reuse the encoder's intermediate maps to produce
//! `[16, H/2, W/2]` and `[8, H, W]` features for the refinement stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBn, Ctx};
use crate::tensor::{ConvSpec, ParamStore, Real, Tensor};

/// Channels and strides of the eight encoder layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureNetConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Build the two upsampling heads used by refinement stages.
    pub cascade_heads: bool,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 8, 16, 16, 16, 32, 32, 32],
            strides: vec![1, 1, 2, 1, 1, 2, 1, 1],
            cascade_heads: true,
        }
    }
}

impl FeatureNetConfig {
    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.strides.len() || self.channels.is_empty() {
            return Err(Error::Config("feature net: channels and strides must have equal, nonzero length".into()));
        }
        let factor: usize = self.strides.iter().product();
        if factor != 4 {
            return Err(Error::Config(format!("feature net strides multiply to {factor}, expected 4")));
        }
        if self.cascade_heads && (self.half_res_layer().is_none() || self.full_res_layer().is_none()) {
            return Err(Error::Config("cascade heads need encoder layers at full and half resolution".into()));
        }
        Ok(())
    }

    /// Index of the last layer running at the given cumulative stride.
    fn last_at(&self, stride: usize) -> Option<usize> {
        let mut s = 1;
        let mut last = None;
        for (i, &st) in self.strides.iter().enumerate() {
            s *= st;
            if s == stride {
                last = Some(i);
            }
        }
        last
    }

    fn full_res_layer(&self) -> Option<usize> {
        self.last_at(1)
    }

    fn half_res_layer(&self) -> Option<usize> {
        self.last_at(2)
    }
}

/// Features of one batch of images at the three pyramid levels.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T: Real> {
    /// `[B, F, H/4, W/4]`.
    pub quarter: Tensor<T>,
    /// `[B, 16, H/2, W/2]`, cascade only.
    pub half: Option<Tensor<T>>,
    /// `[B, 8, H, W]`, cascade only.
    pub full: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
struct Heads {
    up_half: ConvBn,
    lateral_half: Conv,
    out_half: Conv,
    up_full: ConvBn,
    lateral_full: Conv,
    out_full: Conv,
}

#[derive(Debug, Clone)]
pub struct FeatureNet {
    config: FeatureNetConfig,
    layers: Vec<ConvBn>,
    last: Conv,
    heads: Option<Heads>,
}

pub const HALF_CHANNELS: usize = 16;
pub const FULL_CHANNELS: usize = 8;

impl FeatureNet {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, config: FeatureNetConfig) -> Result<Self> {
        config.validate()?;
        let n = config.channels.len();
        let mut layers = Vec::with_capacity(n - 1);
        let mut cin = 3;
        for i in 0..n - 1 {
            let spec = ConvSpec::same(cin, config.channels[i], 3, config.strides[i]);
            layers.push(ConvBn::relu(store, rng, &format!("{name}.l{i}"), spec, 2)?);
            cin = config.channels[i];
        }
        let spec = ConvSpec::same(cin, config.channels[n - 1], 3, config.strides[n - 1]);
        let last = Conv::new(store, rng, &format!("{name}.l{}", n - 1), spec, 2, true)?;
        let heads = if config.cascade_heads {
            let f = config.out_channels();
            let ch = config.channels[config.half_res_layer().expect("validated")];
            let cf = config.channels[config.full_res_layer().expect("validated")];
            Some(Heads {
                up_half: ConvBn::relu(store, rng, &format!("{name}.heads.up_half"), ConvSpec::same(f, HALF_CHANNELS, 3, 1), 2)?,
                lateral_half: Conv::new(store, rng, &format!("{name}.heads.lat_half"), ConvSpec::same(ch, HALF_CHANNELS, 1, 1), 2, true)?,
                out_half: Conv::new(store, rng, &format!("{name}.heads.out_half"), ConvSpec::same(HALF_CHANNELS, HALF_CHANNELS, 3, 1), 2, true)?,
                up_full: ConvBn::relu(store, rng, &format!("{name}.heads.up_full"), ConvSpec::same(HALF_CHANNELS, FULL_CHANNELS, 3, 1), 2)?,
                lateral_full: Conv::new(store, rng, &format!("{name}.heads.lat_full"), ConvSpec::same(cf, FULL_CHANNELS, 1, 1), 2, true)?,
                out_full: Conv::new(store, rng, &format!("{name}.heads.out_full"), ConvSpec::same(FULL_CHANNELS, FULL_CHANNELS, 3, 1), 2, true)?,
            })
        } else {
            None
        };
        Ok(Self { config, layers, last, heads })
    }

    pub fn config(&self) -> &FeatureNetConfig {
        &self.config
    }

    /// Encodes already-normalized images `[3, H, W]` or `[B, 3, H, W]`.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, images: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let enc = self.encode(ctx, images)?;
        if self.heads.is_none() {
            return Ok(FeaturePyramid { quarter: enc.quarter, half: None, full: None });
        }
        let (half, full) = self.decode(ctx, &enc)?;
        Ok(FeaturePyramid { quarter: enc.quarter, half: Some(half), full: Some(full) })
    }

    /// Runs the encoder, keeping the last full- and half-resolution maps.
    pub fn encode<T: Real>(&self, ctx: &Ctx<'_, T>, images: &Tensor<T>) -> Result<Encoded<T>> {
        let rank = images.rank();
        if !(rank == 3 || rank == 4) || images.shape()[rank - 3] != 3 {
            return Err(Error::shape("extract_features", format!("expected [B,3,H,W], got {:?}", images.shape())));
        }
        let (h, w) = (images.shape()[rank - 2], images.shape()[rank - 1]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape("extract_features", format!("{h}x{w} is not divisible by 4")));
        }
        let full_at = self.config.full_res_layer();
        let half_at = self.config.half_res_layer();
        let mut x = images.clone();
        let (mut full_skip, mut half_skip) = (None, None);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(ctx, &x)?;
            if Some(i) == full_at {
                full_skip = Some(x.clone());
            }
            if Some(i) == half_at {
                half_skip = Some(x.clone());
            }
        }
        let quarter = self.last.forward(ctx, &x)?;
        Ok(Encoded { quarter, half_skip, full_skip })
    }

    /// Cascade heads: `[.., 16, H/2, W/2]` and `[.., 8, H, W]` features.
    pub fn decode<T: Real>(&self, ctx: &Ctx<'_, T>, enc: &Encoded<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let heads = self
            .heads
            .as_ref()
            .ok_or_else(|| Error::Config("feature net was built without cascade heads".into()))?;
        let (Some(half_skip), Some(full_skip)) = (&enc.half_skip, &enc.full_skip) else {
            return Err(Error::Config("encoder has no full/half resolution layers".into()));
        };
        let up = |t: &Tensor<T>| t.upsample_nearest(&[2, 2]);
        let mid_half = heads.up_half.forward(ctx, &up(&enc.quarter)?)?.add(&heads.lateral_half.forward(ctx, half_skip)?)?;
        let half = heads.out_half.forward(ctx, &mid_half)?;
        let mid_full = heads.up_full.forward(ctx, &up(&mid_half)?)?.add(&heads.lateral_full.forward(ctx, full_skip)?)?;
        let full = heads.out_full.forward(ctx, &mid_full)?;
        Ok((half, full))
    }
}

/// Encoder outputs: the quarter-resolution features plus skip maps.
#[derive(Debug, Clone)]
pub struct Encoded<T: Real> {
    pub quarter: Tensor<T>,
    pub half_skip: Option<Tensor<T>>,
    pub full_skip: Option<Tensor<T>>,
}

/// Per-image, per-channel standardization of an RGB image `[3, H, W]`
/// with values in `[0, 1]`.
pub fn normalize_image(rgb: &[f32], height: usize, width: usize) -> Vec<f32> {
    let n = height * width;
    let mut out = vec![0.0; rgb.len()];
    for c in 0..rgb.len() / n {
        let plane = &rgb[c * n..(c + 1) * n];
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var.sqrt() + 1e-5);
        for (o, &v) in out[c * n..(c + 1) * n].iter_mut().zip(plane) {
            *o = ((v as f64 - mean) * inv) as f32;
        }
    }
    out
}
