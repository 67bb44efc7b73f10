//! Elementwise, reduction and layout operators.

use super::{axis_split, numel, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

impl Bin {
    fn name(self) -> &'static str {
        match self {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
            Bin::Div => "div",
        }
    }

    fn apply<T: Real>(self, a: T, b: T) -> T {
        match self {
            Bin::Add => a + b,
            Bin::Sub => a - b,
            Bin::Mul => a * b,
            Bin::Div => a / b,
        }
    }

    /// Partial derivatives (d/da, d/db) at (a, b).
    fn partials<T: Real>(self, a: T, b: T) -> (T, T) {
        match self {
            Bin::Add => (T::one(), T::one()),
            Bin::Sub => (T::one(), -T::one()),
            Bin::Mul => (b, a),
            Bin::Div => (T::one() / b, -a / (b * b)),
        }
    }
}

fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: Bin) -> Result<Tensor<T>> {
    let (na, nb) = (a.numel(), b.numel());
    let shape = if a.shape() == b.shape() {
        a.shape().to_vec()
    } else if nb == 1 {
        a.shape().to_vec()
    } else if na == 1 {
        b.shape().to_vec()
    } else {
        return Err(Error::shape(
            op.name(),
            format!("{:?} vs {:?} (only scalar broadcasting)", a.shape(), b.shape()),
        ));
    };
    let n = numel(&shape);
    let (ad, bd) = (a.data(), b.data());
    let at = |i: usize| if na == 1 { ad[0] } else { ad[i] };
    let bt = |i: usize| if nb == 1 { bd[0] } else { bd[i] };
    let data: Vec<T> = (0..n).map(|i| op.apply(at(i), bt(i))).collect();
    Ok(Tensor::from_op(
        op.name(),
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, _, parents| {
            let (ad, bd) = (parents[0].data(), parents[1].data());
            let (na, nb) = (ad.len(), bd.len());
            let mut ga = vec![T::zero(); na];
            let mut gb = vec![T::zero(); nb];
            for (i, &gi) in g.iter().enumerate() {
                let av = if na == 1 { ad[0] } else { ad[i] };
                let bv = if nb == 1 { bd[0] } else { bd[i] };
                let (da, db) = op.partials(av, bv);
                ga[if na == 1 { 0 } else { i }] += gi * da;
                gb[if nb == 1 { 0 } else { i }] += gi * db;
            }
            vec![Some(ga), Some(gb)]
        }),
    ))
}

/// Pointwise map with derivative expressed through input `x` and output `y`.
fn unary<T: Real>(
    x: &Tensor<T>,
    name: &'static str,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Tensor<T> {
    let data: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        name,
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g, y, parents| {
            let xd = parents[0].data();
            let gx = g
                .iter()
                .zip(xd.iter().zip(y))
                .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                .collect();
            vec![Some(gx)]
        }),
    )
}

impl<T: Real> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Bin::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Bin::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Bin::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Bin::Div)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::lit(c);
        unary(self, "add_scalar", move |v| v + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::lit(c);
        unary(self, "mul_scalar", move |v| v * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-1.0)
    }

    /// |x| with subgradient 0 at the origin.
    pub fn abs(&self) -> Tensor<T> {
        unary(self, "abs", |v| v.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        unary(self, "relu", |v| v.max(T::zero()), |x, _| {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary(
            self,
            "sigmoid",
            |v| {
                // Evaluated on the side that cannot overflow.
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            |_, y| y * (T::one() - y),
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        unary(self, "exp", |v| v.exp(), |_, y| y)
    }

    /// Keeps entries strictly above `tau`, zeroes the rest. The gradient is
    /// the identity on kept entries and zero elsewhere.
    pub fn threshold(&self, tau: f64) -> Tensor<T> {
        let t = T::lit(tau);
        unary(
            self,
            "threshold",
            move |v| if v > t { v } else { T::zero() },
            move |x, _| if x > t { T::one() } else { T::zero() },
        )
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1) as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums out `axis` (the axis is removed from the shape).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.check_axis("sum_axis", axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(
            "sum_axis",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        gx[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Softmax along `axis`; every slice along the axis sums to one.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        self.check_axis("softmax", axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| x[idx(l)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for l in 0..len {
                    let e = (x[idx(l)] - m).exp();
                    y[idx(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    y[idx(l)] /= s;
                }
            }
        }
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: T = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                        for l in 0..len {
                            gx[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Maximum along `axis` with argmax indices. Ties resolve to the lowest
    /// index, and the gradient flows only to that element.
    pub fn max_axis(&self, axis: usize) -> Result<(Tensor<T>, Vec<usize>)> {
        self.check_axis("max_axis", axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let x = self.data();
        let mut vals = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut bv = x[o * len * inner + i];
                for l in 1..len {
                    let v = x[(o * len + l) * inner + i];
                    if v > bv {
                        bv = v;
                        best = l;
                    }
                }
                vals.push(bv);
                arg.push(best);
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let routes = arg.clone();
        let out = Tensor::from_op(
            "max_axis",
            shape,
            vals,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let k = o * inner + i;
                        gx[(o * len + routes[k]) * inner + i] += g[k];
                    }
                }
                vec![Some(gx)]
            }),
        );
        Ok((out, arg))
    }

    /// Nearest-neighbour upsampling of the trailing `factors.len()` axes.
    pub fn upsample_nearest(&self, factors: &[usize]) -> Result<Tensor<T>> {
        let k = factors.len();
        if k == 0 || k > self.rank() || factors.iter().any(|&f| f == 0) {
            return Err(Error::shape(
                "upsample_nearest",
                format!("factors {:?} for shape {:?}", factors, self.shape()),
            ));
        }
        let lead = self.rank() - k;
        let outer = numel(&self.shape()[..lead]);
        let in_sp: Vec<usize> = self.shape()[lead..].to_vec();
        let out_sp: Vec<usize> = in_sp.iter().zip(factors).map(|(s, f)| s * f).collect();
        let in_n = numel(&in_sp);
        let out_n = numel(&out_sp);
        // Source offset for each output position, shared by every outer slice.
        let mut map = vec![0usize; out_n];
        for (o, m) in map.iter_mut().enumerate() {
            let mut rem = o;
            let mut src = 0;
            let mut stride = 1;
            for a in (0..k).rev() {
                let c = rem % out_sp[a];
                rem /= out_sp[a];
                src += (c / factors[a]) * stride;
                stride *= in_sp[a];
            }
            *m = src;
        }
        let x = self.data();
        let mut out = Vec::with_capacity(outer * out_n);
        for b in 0..outer {
            let base = b * in_n;
            out.extend(map.iter().map(|&m| x[base + m]));
        }
        let mut shape = self.shape()[..lead].to_vec();
        shape.extend(&out_sp);
        Ok(Tensor::from_op(
            "upsample_nearest",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); outer * in_n];
                for b in 0..outer {
                    for (o, &m) in map.iter().enumerate() {
                        gx[b * in_n + m] += g[b * out_n + o];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "empty input list"))?;
        let inner = first.shape().to_vec();
        if let Some(bad) = items.iter().find(|t| t.shape() != inner.as_slice()) {
            return Err(Error::shape(
                "stack",
                format!("{:?} vs {:?}", inner, bad.shape()),
            ));
        }
        let n = first.numel();
        let mut data = Vec::with_capacity(n * items.len());
        for t in items {
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![items.len()];
        shape.extend(&inner);
        Ok(Tensor::from_op(
            "stack",
            shape,
            data,
            items.to_vec(),
            Box::new(move |g, _, parents| {
                (0..parents.len())
                    .map(|i| Some(g[i * n..(i + 1) * n].to_vec()))
                    .collect()
            }),
        ))
    }

    /// Slice `index` of the leading axis (the axis is removed).
    pub fn select(&self, index: usize) -> Result<Tensor<T>> {
        if self.rank() == 0 || index >= self.shape()[0] {
            return Err(Error::shape(
                "select",
                format!("index {} into {:?}", index, self.shape()),
            ));
        }
        let shape = self.shape()[1..].to_vec();
        let n = numel(&shape);
        let total = self.numel();
        let data = self.data()[index * n..(index + 1) * n].to_vec();
        Ok(Tensor::from_op(
            "select",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); total];
                gx[index * n..(index + 1) * n].copy_from_slice(g);
                vec![Some(gx)]
            }),
        ))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::shape(op, format!("axis {} of {:?}", axis, self.shape())));
        }
        Ok(())
    }
}
