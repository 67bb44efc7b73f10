//! 2D/3D convolution via im2col and GEMM.
//!
//! Both ranks share one kernel: a 2D convolution is a 3D one with a unit
//! depth axis. Inputs are `[C, *spatial]` or batched `[B, C, *spatial]`.
//! Weights are `[C_out, C_in, k, ..]` for regular convolutions and
//! `[C_in, C_out, k, ..]` for transposed ones (the adjoint layout).

use super::real::{gemm, Mat};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Hyper-parameters of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Kernel edge length (k x k or k x k x k).
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl ConvSpec {
    /// Odd kernel with "same" padding.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self { in_channels, out_channels, kernel, stride, padding: kernel / 2, transposed: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::InvalidArgument(format!("kernel {} must be odd", self.kernel)));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Output extent of one spatial axis.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if self.transposed {
            ((input.checked_sub(1)?) * s + k).checked_sub(2 * p)
        } else {
            (input + 2 * p).checked_sub(k).map(|v| v / s + 1)
        }
    }

    pub fn weight_shape(&self, rank: usize) -> Vec<usize> {
        let mut s = if self.transposed {
            vec![self.in_channels, self.out_channels]
        } else {
            vec![self.out_channels, self.in_channels]
        };
        s.extend(std::iter::repeat_n(self.kernel, rank));
        s
    }
}

/// Geometry of the underlying regular convolution (`big` -> `small`).
/// For a transposed layer the roles of input and output swap.
#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    sd: usize,
    sh: usize,
    sw: usize,
    pd: usize,
    ph: usize,
    pw: usize,
    od: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kd * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.od * self.oh * self.ow
    }

    fn big_len(&self) -> usize {
        self.c * self.d * self.h * self.w
    }
}

fn im2col<T: Real>(x: &[T], g: &Geom, cols: &mut [T]) {
    let ncol = g.cols();
    let mut row = 0;
    for c in 0..g.c {
        let xc = &x[c * g.d * g.h * g.w..(c + 1) * g.d * g.h * g.w];
        for kz in 0..g.kd {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let dst = &mut cols[row * ncol..(row + 1) * ncol];
                    let mut o = 0;
                    for oz in 0..g.od {
                        let z = (oz * g.sd + kz) as isize - g.pd as isize;
                        if z < 0 || z >= g.d as isize {
                            dst[o..o + g.oh * g.ow].iter_mut().for_each(|v| *v = T::zero());
                            o += g.oh * g.ow;
                            continue;
                        }
                        let plane = &xc[z as usize * g.h * g.w..(z as usize + 1) * g.h * g.w];
                        for oy in 0..g.oh {
                            let y = (oy * g.sh + ky) as isize - g.ph as isize;
                            if y < 0 || y >= g.h as isize {
                                dst[o..o + g.ow].iter_mut().for_each(|v| *v = T::zero());
                                o += g.ow;
                                continue;
                            }
                            let line = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                            if g.sw == 1 {
                                // Contiguous run with zero borders.
                                let start = kx as isize - g.pw as isize;
                                for ox in 0..g.ow {
                                    let xx = start + ox as isize;
                                    dst[o + ox] = if xx >= 0 && (xx as usize) < g.w {
                                        line[xx as usize]
                                    } else {
                                        T::zero()
                                    };
                                }
                            } else {
                                for ox in 0..g.ow {
                                    let xx = (ox * g.sw + kx) as isize - g.pw as isize;
                                    dst[o + ox] = if xx >= 0 && (xx as usize) < g.w {
                                        line[xx as usize]
                                    } else {
                                        T::zero()
                                    };
                                }
                            }
                            o += g.ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `x`.
fn col2im<T: Real>(cols: &[T], g: &Geom, x: &mut [T]) {
    let ncol = g.cols();
    let mut row = 0;
    for c in 0..g.c {
        let xc = &mut x[c * g.d * g.h * g.w..(c + 1) * g.d * g.h * g.w];
        for kz in 0..g.kd {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    let mut o = 0;
                    for oz in 0..g.od {
                        let z = (oz * g.sd + kz) as isize - g.pd as isize;
                        if z < 0 || z >= g.d as isize {
                            o += g.oh * g.ow;
                            continue;
                        }
                        let zoff = z as usize * g.h * g.w;
                        for oy in 0..g.oh {
                            let y = (oy * g.sh + ky) as isize - g.ph as isize;
                            if y < 0 || y >= g.h as isize {
                                o += g.ow;
                                continue;
                            }
                            let yoff = zoff + y as usize * g.w;
                            for ox in 0..g.ow {
                                let xx = (ox * g.sw + kx) as isize - g.pw as isize;
                                if xx >= 0 && (xx as usize) < g.w {
                                    xc[yoff + xx as usize] += src[o + ox];
                                }
                            }
                            o += g.ow;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Stride-1 "same" convolution computed directly over flattened volumes.
///
/// For a kernel offset `(dz, dy, dx)` every output voxel `i` reads the
/// input at flat index `i + dz*H*W + dy*W + dx`. Reads that would wrap
/// across a row or plane boundary land on a small set of rows/columns,
/// which are zeroed in a per-`(dy, dx)` masked copy of the input; reads
/// past either end are trimmed from the range. Each offset then becomes
/// one long contiguous multiply-add.
const TILE: usize = 8;
const CO_BLOCK: usize = 4;

struct Direct {
    d: usize,
    h: usize,
    w: usize,
    kd: usize,
    kh: usize,
    kw: usize,
}

impl Direct {
    fn n(&self) -> usize {
        self.d * self.h * self.w
    }

    fn taps(&self) -> usize {
        self.kd * self.kh * self.kw
    }

    /// Flat offset of tap `(kz, ky, kx)`.
    fn offset(&self, kz: usize, ky: usize, kx: usize) -> isize {
        let dz = kz as isize - (self.kd / 2) as isize;
        let dy = ky as isize - (self.kh / 2) as isize;
        let dx = kx as isize - (self.kw / 2) as isize;
        dz * (self.h * self.w) as isize + dy * self.w as isize + dx
    }

    /// Plane mask for `(ky, kx)`: false on source rows/columns that are
    /// only ever reached through a wrapped (invalid) read.
    fn plane_mask(&self, ky: usize, kx: usize) -> Vec<bool> {
        let dy = ky as isize - (self.kh / 2) as isize;
        let dx = kx as isize - (self.kw / 2) as isize;
        let (h, w) = (self.h as isize, self.w as isize);
        let mut m = vec![true; self.h * self.w];
        for y in 0..h {
            for x in 0..w {
                let bad_x = if dx > 0 { x < dx } else { x >= w + dx };
                let bad_y = if dy > 0 { y < dy } else { y >= h + dy };
                if (dx != 0 && bad_x) || (dy != 0 && bad_y) {
                    m[(y * w + x) as usize] = false;
                }
            }
        }
        m
    }

    fn masks(&self) -> Vec<Vec<bool>> {
        let mut out = Vec::with_capacity(self.kh * self.kw);
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                out.push(self.plane_mask(ky, kx));
            }
        }
        out
    }

    /// Zero margin around each masked copy so shifted tiles never leave
    /// the buffer.
    fn margin(&self) -> usize {
        (self.kd / 2) * self.h * self.w + (self.kh / 2) * self.w + self.kw / 2
    }

    fn padded_len(&self) -> usize {
        self.n() + 2 * self.margin() + TILE
    }

    /// Masked, zero-padded copies of one channel: `[kh*kw, padded]`.
    fn variants<T: Real>(&self, src: &[T], masks: &[Vec<bool>], buf: &mut [T]) {
        let hw = self.h * self.w;
        let n = self.n();
        let (pl, m) = (self.padded_len(), self.margin());
        for (v, mask) in masks.iter().enumerate() {
            let dst = &mut buf[v * pl + m..][..n];
            for (dp, sp) in dst.chunks_exact_mut(hw).zip(src.chunks_exact(hw)) {
                for ((d, &s), &keep) in dp.iter_mut().zip(sp).zip(mask) {
                    *d = if keep { s } else { T::zero() };
                }
            }
        }
    }

    /// Per-tap flat offsets and mask-variant indices.
    fn tap_table(&self) -> Vec<(isize, usize)> {
        let mut t = Vec::with_capacity(self.taps());
        for kz in 0..self.kd {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    t.push((self.offset(kz, ky, kx), ky * self.kw + kx));
                }
            }
        }
        t
    }

    /// `out[co] += sum_ci sum_k w[co, ci, k] * x[ci] shifted by k`.
    /// `x` is `[cin, n]`, `out` is `[cout, n]`, `wt` is `[cout, cin, taps]`.
    /// For each input channel, a `CO_BLOCK x TILE` block of outputs is
    /// accumulated in registers over all taps.
    fn forward<T: Real>(&self, x: &[T], cin: usize, wt: &[T], cout: usize, out: &mut [T]) {
        let n = self.n();
        let taps = self.tap_table();
        let nt = taps.len();
        let masks = self.masks();
        let (pl, m) = (self.padded_len(), self.margin() as isize);
        let mut buf = vec![T::zero(); masks.len() * pl];
        let blocks = cout.div_ceil(CO_BLOCK);
        // Weights regrouped as [ci, block, tap, CO_BLOCK], zero padded.
        let mut wb = vec![T::zero(); cin * blocks * nt * CO_BLOCK];
        for co in 0..cout {
            for ci in 0..cin {
                for t in 0..nt {
                    wb[((ci * blocks + co / CO_BLOCK) * nt + t) * CO_BLOCK + co % CO_BLOCK] = wt[(co * cin + ci) * nt + t];
                }
            }
        }
        let starts: Vec<usize> = taps.iter().map(|&(off, v)| ((v * pl) as isize + m + off) as usize).collect();
        for ci in 0..cin {
            self.variants(&x[ci * n..(ci + 1) * n], &masks, &mut buf);
            for b in 0..blocks {
                let wblk = &wb[(ci * blocks + b) * nt * CO_BLOCK..(ci * blocks + b + 1) * nt * CO_BLOCK];
                for i0 in (0..n).step_by(TILE) {
                    let mut acc = [[T::zero(); TILE]; CO_BLOCK];
                    for (t, &st) in starts.iter().enumerate() {
                        let s: &[T; TILE] = buf[st + i0..st + i0 + TILE].try_into().expect("tile");
                        let w: &[T; CO_BLOCK] = wblk[t * CO_BLOCK..(t + 1) * CO_BLOCK].try_into().expect("block");
                        for c in 0..CO_BLOCK {
                            for l in 0..TILE {
                                acc[c][l] += w[c] * s[l];
                            }
                        }
                    }
                    let len = TILE.min(n - i0);
                    for (c, a) in acc.iter().enumerate() {
                        let co = b * CO_BLOCK + c;
                        if co < cout {
                            for (o, &v) in out[co * n + i0..co * n + i0 + len].iter_mut().zip(a) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// `gw[co, ci, k] += <g[co], x[ci] shifted by k>`.
    fn weight_grad<T: Real>(&self, x: &[T], cin: usize, g: &[T], cout: usize, gw: &mut [T]) {
        let n = self.n();
        let taps = self.tap_table();
        let nt = taps.len();
        let masks = self.masks();
        let (pl, m) = (self.padded_len(), self.margin() as isize);
        let mut buf = vec![T::zero(); masks.len() * pl];
        let full = n / TILE * TILE;
        for ci in 0..cin {
            self.variants(&x[ci * n..(ci + 1) * n], &masks, &mut buf);
            for (t, &(off, v)) in taps.iter().enumerate() {
                let base = ((v * pl) as isize + m + off) as usize;
                let src = &buf[base..base + n];
                for co in 0..cout {
                    let gc = &g[co * n..(co + 1) * n];
                    let mut acc = [T::zero(); TILE];
                    for i0 in (0..full).step_by(TILE) {
                        let a: &[T; TILE] = gc[i0..i0 + TILE].try_into().expect("tile");
                        let b: &[T; TILE] = src[i0..i0 + TILE].try_into().expect("tile");
                        for l in 0..TILE {
                            acc[l] += a[l] * b[l];
                        }
                    }
                    let mut s = acc.iter().copied().sum::<T>();
                    for i in full..n {
                        s += gc[i] * src[i];
                    }
                    gw[(co * cin + ci) * nt + t] += s;
                }
            }
        }
    }

    /// Kernel of the adjoint convolution: channels swapped, taps reversed.
    fn flipped<T: Real>(&self, wt: &[T], cin: usize, cout: usize) -> Vec<T> {
        let taps = self.taps();
        let mut out = vec![T::zero(); wt.len()];
        for co in 0..cout {
            for ci in 0..cin {
                for t in 0..taps {
                    out[(ci * cout + co) * taps + (taps - 1 - t)] = wt[(co * cin + ci) * taps + t];
                }
            }
        }
        out
    }
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    conv_nd(input, spec, weight, bias, 2)
}

pub fn conv3d<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    conv_nd(input, spec, weight, bias, 3)
}

fn conv_nd<T: Real>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    rank: usize,
) -> Result<Tensor<T>> {
    let op = if rank == 2 { "conv2d" } else { "conv3d" };
    spec.validate()?;
    let batched = match input.rank() {
        r if r == rank + 1 => false,
        r if r == rank + 2 => true,
        _ => {
            return Err(Error::shape(
                op,
                format!("input {:?} is not [C, ..] or [B, C, ..] with {} spatial axes", input.shape(), rank),
            ))
        }
    };
    let batch = if batched { input.shape()[0] } else { 1 };
    let cdim = usize::from(batched);
    if input.shape()[cdim] != spec.in_channels {
        return Err(Error::shape(
            op,
            format!("input has {} channels, spec expects {}", input.shape()[cdim], spec.in_channels),
        ));
    }
    if weight.shape() != spec.weight_shape(rank).as_slice() {
        return Err(Error::shape(
            op,
            format!("weight {:?}, expected {:?}", weight.shape(), spec.weight_shape(rank)),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shape(op, format!("bias {:?}", b.shape())));
        }
    }
    let in_sp: Vec<usize> = input.shape()[cdim + 1..].to_vec();
    let mut out_sp = Vec::with_capacity(rank);
    for &s in &in_sp {
        match spec.output_len(s) {
            Some(o) if o > 0 => out_sp.push(o),
            _ => {
                return Err(Error::shape(
                    op,
                    format!("spatial extent {} too small for kernel {} pad {}", s, spec.kernel, spec.padding),
                ))
            }
        }
    }
    // Lift to 3D.
    let lift = |v: &[usize], unit: usize| -> [usize; 3] {
        if rank == 2 {
            [unit, v[0], v[1]]
        } else {
            [v[0], v[1], v[2]]
        }
    };
    let (k3, s3, p3) = if rank == 2 {
        ([1, spec.kernel, spec.kernel], [1, spec.stride, spec.stride], [0, spec.padding, spec.padding])
    } else {
        ([spec.kernel; 3], [spec.stride; 3], [spec.padding; 3])
    };
    let (big, small, big_c, small_c) = if spec.transposed {
        (lift(&out_sp, 1), lift(&in_sp, 1), spec.out_channels, spec.in_channels)
    } else {
        (lift(&in_sp, 1), lift(&out_sp, 1), spec.in_channels, spec.out_channels)
    };
    let geom = Geom {
        c: big_c,
        d: big[0],
        h: big[1],
        w: big[2],
        kd: k3[0],
        kh: k3[1],
        kw: k3[2],
        sd: s3[0],
        sh: s3[1],
        sw: s3[2],
        pd: p3[0],
        ph: p3[1],
        pw: p3[2],
        od: small[0],
        oh: small[1],
        ow: small[2],
    };
    let transposed = spec.transposed;
    let (k_rows, p_cols) = (geom.rows(), geom.cols());
    let big_len = geom.big_len();
    let small_len = small_c * p_cols;
    let (in_len, out_len) = if transposed { (small_len, big_len) } else { (big_len, small_len) };
    let out_c = spec.out_channels;
    let out_per_c = out_len / out_c;

    if !transposed && spec.stride == 1 && spec.padding == spec.kernel / 2 {
        let direct = Direct { d: big[0], h: big[1], w: big[2], kd: k3[0], kh: k3[1], kw: k3[2] };
        return Ok(conv_direct(input, weight, bias, direct, batch, spec.in_channels, out_c, &out_sp, batched, op));
    }
    let x = input.data();
    let wd = weight.data();
    let mut out = vec![T::zero(); batch * out_len];
    let mut cols = vec![T::zero(); k_rows * p_cols];
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        if transposed {
            // cols = W^T x ; out = col2im(cols)
            gemm(Mat::new(wd, small_c, k_rows).t(), Mat::new(xb, small_c, p_cols), T::zero(), &mut cols);
            col2im(&cols, &geom, ob);
        } else {
            im2col(xb, &geom, &mut cols);
            gemm(Mat::new(wd, small_c, k_rows), Mat::new(&cols, k_rows, p_cols), T::zero(), ob);
        }
        if let Some(bias) = bias {
            for (c, &bv) in bias.data().iter().enumerate() {
                ob[c * out_per_c..(c + 1) * out_per_c].iter_mut().for_each(|v| *v += bv);
            }
        }
    }

    let mut shape = Vec::with_capacity(rank + 2);
    if batched {
        shape.push(batch);
    }
    shape.push(out_c);
    shape.extend(&out_sp);
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        op,
        shape,
        out,
        parents,
        Box::new(move |g, _, parents| {
            let x = parents[0].data();
            let wd = parents[1].data();
            let need_x = parents[0].requires_grad();
            let need_w = parents[1].requires_grad();
            let mut gx = vec![T::zero(); if need_x { batch * in_len } else { 0 }];
            let mut gw = vec![T::zero(); if need_w { wd.len() } else { 0 }];
            let mut cols = vec![T::zero(); k_rows * p_cols];
            for b in 0..batch {
                let xb = &x[b * in_len..(b + 1) * in_len];
                let gb = &g[b * out_len..(b + 1) * out_len];
                if transposed {
                    // Forward was out = col2im(W^T x): its adjoint is im2col.
                    im2col(gb, &geom, &mut cols);
                    if need_x {
                        gemm(
                            Mat::new(wd, small_c, k_rows),
                            Mat::new(&cols, k_rows, p_cols),
                            T::zero(),
                            &mut gx[b * in_len..(b + 1) * in_len],
                        );
                    }
                    if need_w {
                        gemm(Mat::new(xb, small_c, p_cols), Mat::new(&cols, k_rows, p_cols).t(), T::one(), &mut gw);
                    }
                } else {
                    if need_w {
                        im2col(xb, &geom, &mut cols);
                        gemm(Mat::new(gb, small_c, p_cols), Mat::new(&cols, k_rows, p_cols).t(), T::one(), &mut gw);
                    }
                    if need_x {
                        gemm(Mat::new(wd, small_c, k_rows).t(), Mat::new(gb, small_c, p_cols), T::zero(), &mut cols);
                        col2im(&cols, &geom, &mut gx[b * in_len..(b + 1) * in_len]);
                    }
                }
            }
            let mut grads = vec![need_x.then_some(gx), need_w.then_some(gw)];
            if has_bias {
                let mut gbias = vec![T::zero(); out_c];
                for b in 0..batch {
                    for (c, gbc) in gbias.iter_mut().enumerate() {
                        let s = b * out_len + c * out_per_c;
                        *gbc += g[s..s + out_per_c].iter().copied().sum::<T>();
                    }
                }
                grads.push(Some(gbias));
            }
            grads
        }),
    ))
}

#[allow(clippy::too_many_arguments)]
fn conv_direct<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: Direct,
    batch: usize,
    cin: usize,
    cout: usize,
    out_sp: &[usize],
    batched: bool,
    op: &'static str,
) -> Tensor<T> {
    let n = geom.n();
    let (in_len, out_len) = (cin * n, cout * n);
    let x = input.data();
    let wd = weight.data();
    let mut out = vec![T::zero(); batch * out_len];
    for b in 0..batch {
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        if let Some(bias) = bias {
            for (c, &bv) in bias.data().iter().enumerate() {
                ob[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = bv);
            }
        }
        geom.forward(&x[b * in_len..(b + 1) * in_len], cin, wd, cout, ob);
    }
    let mut shape = Vec::with_capacity(out_sp.len() + 2);
    if batched {
        shape.push(batch);
    }
    shape.push(cout);
    shape.extend(out_sp);
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    Tensor::from_op(
        op,
        shape,
        out,
        parents,
        Box::new(move |g, _, parents| {
            let x = parents[0].data();
            let wd = parents[1].data();
            let need_x = parents[0].requires_grad();
            let need_w = parents[1].requires_grad();
            let mut gx = vec![T::zero(); if need_x { batch * in_len } else { 0 }];
            let mut gw = vec![T::zero(); if need_w { wd.len() } else { 0 }];
            let flipped = if need_x { geom.flipped(wd, cin, cout) } else { Vec::new() };
            for b in 0..batch {
                let gb = &g[b * out_len..(b + 1) * out_len];
                if need_w {
                    geom.weight_grad(&x[b * in_len..(b + 1) * in_len], cin, gb, cout, &mut gw);
                }
                if need_x {
                    geom.forward(gb, cout, &flipped, cin, &mut gx[b * in_len..(b + 1) * in_len]);
                }
            }
            let mut grads = vec![need_x.then_some(gx), need_w.then_some(gw)];
            if has_bias {
                let mut gbias = vec![T::zero(); cout];
                for b in 0..batch {
                    for (c, gbc) in gbias.iter_mut().enumerate() {
                        let s = b * out_len + c * n;
                        *gbc += g[s..s + n].iter().copied().sum::<T>();
                    }
                }
                grads.push(Some(gbias));
            }
            grads
        }),
    )
}
