use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Bilinear sampling of `feature [C, H, W]` at `coords [2, H', W']`.
///
/// `coords[0]` holds the column (x) and `coords[1]` the row (y), in pixel
/// units with pixel centres at integers. A sample is valid iff it lies in
/// `[0, W-1] x [0, H-1]`; invalid samples are zero. Gradients flow to the
/// feature values and to the coordinates.
pub fn bilinear_sample<T: Real>(
    feature: &Tensor<T>,
    coords: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<bool>)> {
    if feature.rank() != 3 || coords.rank() != 3 || coords.shape()[0] != 2 {
        return Err(Error::shape(
            "bilinear_sample",
            format!("feature {:?}, coords {:?}", feature.shape(), coords.shape()),
        ));
    }
    let (c, h, w) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    let (oh, ow) = (coords.shape()[1], coords.shape()[2]);
    let n = oh * ow;
    let cd = coords.data();

    // Corner indices and weights per output location; None when invalid.
    let taps: Vec<Option<Tap<T>>> = (0..n).map(|i| Tap::new(cd[i], cd[n + i], h, w)).collect();
    let valid: Vec<bool> = taps.iter().map(Option::is_some).collect();

    let f = feature.data();
    let mut out = vec![T::zero(); c * n];
    for ch in 0..c {
        let plane = &f[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * n..(ch + 1) * n];
        for (o, tap) in taps.iter().enumerate() {
            if let Some(t) = tap {
                dst[o] = t.eval(plane);
            }
        }
    }
    let mut shape = vec![c];
    shape.extend([oh, ow]);
    let result = Tensor::from_op(
        "bilinear_sample",
        shape,
        out,
        vec![feature.clone(), coords.clone()],
        Box::new(move |g, _, parents| {
            let f = parents[0].data();
            let need_f = parents[0].requires_grad();
            let need_c = parents[1].requires_grad();
            let mut gf = vec![T::zero(); if need_f { f.len() } else { 0 }];
            let mut gc = vec![T::zero(); if need_c { 2 * n } else { 0 }];
            for ch in 0..c {
                let plane = &f[ch * h * w..(ch + 1) * h * w];
                let gch = &g[ch * n..(ch + 1) * n];
                for (o, tap) in taps.iter().enumerate() {
                    let Some(t) = tap else { continue };
                    let go = gch[o];
                    if need_f {
                        let gp = &mut gf[ch * h * w..(ch + 1) * h * w];
                        gp[t.i00] += go * t.w00;
                        gp[t.i01] += go * t.w01;
                        gp[t.i10] += go * t.w10;
                        gp[t.i11] += go * t.w11;
                    }
                    if need_c {
                        let (dx, dy) = t.coord_grad(plane);
                        gc[o] += go * dx;
                        gc[n + o] += go * dy;
                    }
                }
            }
            vec![need_f.then_some(gf), need_c.then_some(gc)]
        }),
    );
    Ok((result, valid))
}

struct Tap<T> {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    fx: T,
    fy: T,
    w00: T,
    w01: T,
    w10: T,
    w11: T,
}

impl<T: Real> Tap<T> {
    fn new(x: T, y: T, h: usize, w: usize) -> Option<Self> {
        let zero = T::zero();
        let (wm, hm) = (T::lit((w - 1) as f64), T::lit((h - 1) as f64));
        if !(x >= zero && x <= wm && y >= zero && y <= hm) {
            return None;
        }
        let x0 = x.floor().to_usize()?.min(w.saturating_sub(2));
        let y0 = y.floor().to_usize()?.min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = x - T::lit(x0 as f64);
        let fy = y - T::lit(y0 as f64);
        let one = T::one();
        Some(Self {
            i00: y0 * w + x0,
            i01: y0 * w + x1,
            i10: y1 * w + x0,
            i11: y1 * w + x1,
            fx,
            fy,
            w00: (one - fx) * (one - fy),
            w01: fx * (one - fy),
            w10: (one - fx) * fy,
            w11: fx * fy,
        })
    }

    fn eval(&self, p: &[T]) -> T {
        self.w00 * p[self.i00] + self.w01 * p[self.i01] + self.w10 * p[self.i10] + self.w11 * p[self.i11]
    }

    fn coord_grad(&self, p: &[T]) -> (T, T) {
        let one = T::one();
        let dx = (one - self.fy) * (p[self.i01] - p[self.i00]) + self.fy * (p[self.i11] - p[self.i10]);
        let dy = (one - self.fx) * (p[self.i10] - p[self.i00]) + self.fx * (p[self.i11] - p[self.i01]);
        (dx, dy)
    }
}
