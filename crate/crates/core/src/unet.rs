//! Encoder-decoder over 3D volumes with additive skip connections.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvBn, Ctx};
use crate::tensor::{ConvSpec, ParamStore, Real, Tensor};

/// `channels[l]` is the width at scale `l`; each extra scale halves every
/// spatial axis. Decoding upsamples by nearest neighbour, convolves, and
/// adds the encoder map of the same scale.
#[derive(Debug, Clone)]
pub struct UNet3d {
    stem: ConvBn,
    down: Vec<ConvBn>,
    enc: Vec<ConvBn>,
    up: Vec<ConvBn>,
    channels: Vec<usize>,
}

impl UNet3d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        channels: &[usize],
    ) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Config(format!("{name}: u-net needs at least one scale")));
        }
        let stem = ConvBn::relu(store, rng, &format!("{name}.stem"), ConvSpec::same(in_channels, channels[0], 3, 1), 3)?;
        let mut down = Vec::new();
        let mut enc = Vec::new();
        let mut up = Vec::new();
        for l in 1..channels.len() {
            let (a, b) = (channels[l - 1], channels[l]);
            down.push(ConvBn::relu(store, rng, &format!("{name}.down{l}"), ConvSpec::same(a, b, 3, 2), 3)?);
            enc.push(ConvBn::relu(store, rng, &format!("{name}.enc{l}"), ConvSpec::same(b, b, 3, 1), 3)?);
            up.push(ConvBn::relu(store, rng, &format!("{name}.up{l}"), ConvSpec::same(b, a, 3, 1), 3)?);
        }
        Ok(Self { stem, down, enc, up, channels: channels.to_vec() })
    }

    pub fn scales(&self) -> usize {
        self.channels.len()
    }

    pub fn out_channels(&self) -> usize {
        self.channels[0]
    }

    /// Spatial divisor every axis must be a multiple of.
    pub fn divisor(&self) -> usize {
        1 << (self.channels.len() - 1)
    }

    pub fn check_input(&self, op: &'static str, spatial: &[usize]) -> Result<()> {
        let k = self.divisor();
        if let Some(&bad) = spatial.iter().find(|&&s| s % k != 0) {
            let padded: Vec<usize> = spatial.iter().map(|s| s.div_ceil(k) * k).collect();
            return Err(Error::shape(
                op,
                format!("spatial dims {spatial:?} must be multiples of {k} ({bad} is not); pad to {padded:?}"),
            ));
        }
        Ok(())
    }

    /// `x` is `[C, D, H, W]` or `[B, C, D, H, W]`.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let r = x.rank();
        if r < 4 {
            return Err(Error::shape("unet3d", format!("input {:?}", x.shape())));
        }
        self.check_input("unet3d", &x.shape()[r - 3..])?;
        let mut skips = vec![self.stem.forward(ctx, x)?];
        for (down, enc) in self.down.iter().zip(&self.enc) {
            let y = enc.forward(ctx, &down.forward(ctx, skips.last().expect("nonempty"))?)?;
            skips.push(y);
        }
        let mut y = skips.pop().expect("nonempty");
        for l in (0..self.up.len()).rev() {
            let u = self.up[l].forward(ctx, &y.upsample_nearest(&[2, 2, 2])?)?;
            y = u.add(&skips[l])?;
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn preserves_spatial_shape() {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let net = UNet3d::new(&mut store, &mut rng, "u", 4, &[8, 16, 32]).unwrap();
        let x = Tensor::<f32>::full(&[2, 4, 8, 4, 8], 0.1);
        let y = net.forward(&Ctx::train(&store), &x).unwrap();
        assert_eq!(y.shape(), &[2, 8, 8, 4, 8]);
        let err = net.forward(&Ctx::train(&store), &Tensor::<f32>::zeros(&[4, 6, 4, 8])).unwrap_err();
        assert!(err.to_string().contains("pad to [8, 4, 8]"), "{err}");
    }
}
