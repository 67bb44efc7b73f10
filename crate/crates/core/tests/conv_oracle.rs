//! Convolutions against a nested-loop reference, forward and backward.

use proptest::prelude::*;
use pvsnet::tensor::{conv2d, conv3d, ConvSpec, Tensor};

#[derive(Debug, Clone)]
struct Case {
    rank: usize,
    spec: ConvSpec,
    input: Vec<usize>,
    x: Vec<f64>,
    w: Vec<f64>,
    b: Vec<f64>,
    g_seed: Vec<f64>,
}

/// Spatial axes padded to three, with a unit leading axis for 2D layers.
fn dims3(rank: usize, s: &[usize]) -> [usize; 3] {
    if rank == 2 {
        [1, s[0], s[1]]
    } else {
        [s[0], s[1], s[2]]
    }
}

/// Reference convolution over `[C, D, H, W]` with per-axis kernel, stride
/// and padding; the depth axis of a 2D layer has kernel 1.
fn reference(case: &Case, x: &[f64], w: &[f64], with_bias: bool) -> (Vec<f64>, [usize; 3]) {
    let sp = &case.spec;
    let [d, h, wd] = dims3(case.rank, &case.input[1..]);
    let k = sp.kernel;
    let kd = if case.rank == 2 { 1 } else { k };
    let (s, p) = (sp.stride, sp.padding);
    let (sd, pd) = if case.rank == 2 { (1, 0) } else { (s, p) };
    let out_len = |n: usize, k: usize, s: usize, p: usize| {
        if sp.transposed {
            (n - 1) * s + k - 2 * p
        } else {
            (n + 2 * p - k) / s + 1
        }
    };
    let od = out_len(d, kd, sd, pd);
    let (oh, ow) = (out_len(h, k, s, p), out_len(wd, k, s, p));
    let (ci_n, co_n) = (sp.in_channels, sp.out_channels);
    let mut out = vec![0.0; co_n * od * oh * ow];
    let widx = |co: usize, ci: usize, a: usize, b: usize, e: usize| {
        let (first, second, n2) = if sp.transposed { (ci, co, co_n) } else { (co, ci, ci_n) };
        (((first * n2 + second) * kd + a) * k + b) * k + e
    };
    for ci in 0..ci_n {
        for co in 0..co_n {
            for a in 0..kd {
                for b in 0..k {
                    for e in 0..k {
                        let wv = w[widx(co, ci, a, b, e)];
                        if sp.transposed {
                            for i in 0..d {
                                for j in 0..h {
                                    for l in 0..wd {
                                        let (z, y, xx) = ((i * sd + a) as isize - pd as isize, (j * s + b) as isize - p as isize, (l * s + e) as isize - p as isize);
                                        if z < 0 || y < 0 || xx < 0 || z >= od as isize || y >= oh as isize || xx >= ow as isize {
                                            continue;
                                        }
                                        out[((co * od + z as usize) * oh + y as usize) * ow + xx as usize] += wv * x[((ci * d + i) * h + j) * wd + l];
                                    }
                                }
                            }
                        } else {
                            for i in 0..od {
                                for j in 0..oh {
                                    for l in 0..ow {
                                        let (z, y, xx) = ((i * sd + a) as isize - pd as isize, (j * s + b) as isize - p as isize, (l * s + e) as isize - p as isize);
                                        if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= wd as isize {
                                            continue;
                                        }
                                        out[((co * od + i) * oh + j) * ow + l] += wv * x[((ci * d + z as usize) * h + y as usize) * wd + xx as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if with_bias {
        let per = od * oh * ow;
        for (co, &bv) in case.b.iter().enumerate() {
            out[co * per..(co + 1) * per].iter_mut().for_each(|v| *v += bv);
        }
    }
    (out, [od, oh, ow])
}

fn case() -> impl Strategy<Value = Case> {
    (2usize..4, 1usize..4, 1usize..4, prop_oneof![Just(1usize), Just(3)], 1usize..3, any::<bool>(), 1usize..6, 1usize..6, 1usize..5)
        .prop_flat_map(|(rank, ci, co, k, stride, transposed, h, w, d)| {
            let padding_max = k / 2;
            (Just((rank, ci, co, k, stride, transposed, h, w, d)), 0..=padding_max)
        })
        .prop_filter("output must be non-empty", |&((rank, _, _, k, s, t, h, w, d), p)| {
            let ok = |n: usize| if t { (n - 1) * s + k > 2 * p } else { n + 2 * p >= k };
            let _ = s;
            ok(h) && ok(w) && (rank == 2 || ok(d))
        })
        .prop_flat_map(|((rank, ci, co, k, stride, transposed, h, w, d), padding)| {
            let spec = ConvSpec { in_channels: ci, out_channels: co, kernel: k, stride, padding, transposed };
            let input = if rank == 2 { vec![ci, h, w] } else { vec![ci, d, h, w] };
            let nx: usize = input.iter().product();
            let nw: usize = spec.weight_shape(rank).iter().product();
            let out_max = co * 16 * 16 * 16;
            (
                Just(rank),
                Just(spec),
                Just(input),
                proptest::collection::vec(-1.0f64..1.0, nx),
                proptest::collection::vec(-1.0f64..1.0, nw),
                proptest::collection::vec(-1.0f64..1.0, co),
                proptest::collection::vec(-1.0f64..1.0, out_max),
            )
        })
        .prop_map(|(rank, spec, input, x, w, b, g_seed)| Case { rank, spec, input, x, w, b, g_seed })
}

fn run(case: &Case, x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    if case.rank == 2 {
        conv2d(x, &case.spec, w, b).unwrap()
    } else {
        conv3d(x, &case.spec, w, b).unwrap()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn forward_matches_loops(c in case()) {
        let x = Tensor::from_vec(&c.input, c.x.clone()).unwrap();
        let w = Tensor::from_vec(&c.spec.weight_shape(c.rank), c.w.clone()).unwrap();
        let b = Tensor::from_vec(&[c.spec.out_channels], c.b.clone()).unwrap();
        let out = run(&c, &x, &w, Some(&b));
        let (want, [od, oh, ow]) = reference(&c, &c.x, &c.w, true);
        let mut shape = vec![c.spec.out_channels];
        if c.rank == 3 {
            shape.push(od);
        }
        shape.extend([oh, ow]);
        prop_assert_eq!(out.shape(), &shape[..]);
        for (a, e) in out.data().iter().zip(&want) {
            prop_assert!((a - e).abs() < 1e-12, "{} vs {}", a, e);
        }
    }

    /// The layer is linear in each argument, so `<dL/dx, x'> = L(x')` for
    /// `L(x) = <conv(x), g>`, and likewise for the weights.
    #[test]
    fn gradients_are_the_adjoint(c in case()) {
        let x = Tensor::param(&c.input, c.x.clone()).unwrap();
        let w = Tensor::param(&c.spec.weight_shape(c.rank), c.w.clone()).unwrap();
        let out = run(&c, &x, &w, None);
        let g: Vec<f64> = c.g_seed[..out.numel()].to_vec();
        out.mul(&Tensor::from_vec(out.shape(), g.clone()).unwrap()).unwrap().sum().backward().unwrap();
        let (gx, gw) = (x.grad().unwrap(), w.grad().unwrap());
        let x2: Vec<f64> = c.x.iter().rev().map(|v| v * 0.7 + 0.1).collect();
        let w2: Vec<f64> = c.w.iter().rev().map(|v| 0.3 - v).collect();
        let lx = dot(&reference(&c, &x2, &c.w, false).0, &g);
        let lw = dot(&reference(&c, &c.x, &w2, false).0, &g);
        prop_assert!((dot(&gx, &x2) - lx).abs() < 1e-9 * (1.0 + lx.abs()), "input adjoint");
        prop_assert!((dot(&gw, &w2) - lw).abs() < 1e-9 * (1.0 + lw.abs()), "weight adjoint");
    }
}

#[test]
fn batched_input_convolves_each_sample() {
    let spec = ConvSpec::same(2, 3, 3, 2);
    let w: Vec<f64> = (0..54).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
    let w = Tensor::from_vec(&spec.weight_shape(2), w).unwrap();
    let xs: Vec<Vec<f64>> = (0..3).map(|s| (0..2 * 5 * 6).map(|i| ((i * 13 + s * 5) % 17) as f64 / 17.0).collect()).collect();
    let batch = Tensor::from_vec(&[3, 2, 5, 6], xs.concat()).unwrap();
    let out = conv2d(&batch, &spec, &w, None).unwrap();
    let per = out.numel() / 3;
    for (s, x) in xs.iter().enumerate() {
        let single = conv2d(&Tensor::from_vec(&[2, 5, 6], x.clone()).unwrap(), &spec, &w, None).unwrap();
        assert_eq!(&out.data()[s * per..(s + 1) * per], single.data());
    }
}
