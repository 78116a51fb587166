//! Primitive forward values against hand-computed and brute-force oracles,
//! and every primitive's backward against central differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surround_depth::autodiff::gradcheck::{gradcheck, GradcheckOptions};
use surround_depth::{Tape, Tensor, Var};

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn eval1(x: Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Var) -> Tensor<f64> {
    let mut t = Tape::new();
    let v = t.constant(x);
    let o = f(&mut t, v);
    t.value(o).clone()
}

fn assert_rel(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let d = (x - y).abs() / x.abs().max(y.abs()).max(1e-12);
        assert!(d < tol, "entry {i}: {x} vs {y} (rel {d})");
    }
}

// ── matmul ───────────────────────────────────────────────────────────

fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            for l in 0..k {
                out[i * p + j] += a.data()[i * k + l] * b.data()[l * p + j];
            }
        }
    }
    out
}

#[test]
fn matmul_hand_cases() {
    let mut t = Tape::<f64>::new();
    let eye = t.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
    let col = t.constant(Tensor::from_f64(&[2, 1], &[3., 4.]).unwrap());
    let r = t.matmul(eye, col).unwrap();
    assert_eq!(t.value(r).data(), &[3., 4.]);
    let row = t.constant(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
    let r = t.matmul(row, col).unwrap();
    assert_eq!(t.value(r).shape(), &[1, 1]);
    assert_eq!(t.value(r).data(), &[11.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = rand_t(&[4, 5], 11);
    let b = rand_t(&[5, 3], 12);
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let r = t.matmul(va, vb).unwrap();
    assert_rel(t.value(r).data(), &matmul_oracle(&a, &b), 1e-6);
}

#[test]
fn batched_matmul_matches_per_batch_loop() {
    let a = rand_t(&[3, 4, 5], 13);
    let b = rand_t(&[3, 5, 2], 14);
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let r = t.matmul(va, vb).unwrap();
    for bi in 0..3 {
        let expect = matmul_oracle(&a.index_axis0(bi).unwrap(), &b.index_axis0(bi).unwrap());
        assert_rel(&t.value(r).data()[bi * 8..(bi + 1) * 8], &expect, 1e-9);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[4, 2]));
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

// ── softmax ──────────────────────────────────────────────────────────

#[test]
fn softmax_examples() {
    let s = |v: &[f64]| eval1(Tensor::from_f64(&[v.len()], v).unwrap(), |t, x| t.softmax_lastdim(x).unwrap());
    assert_eq!(s(&[0.0, 0.0]).data(), &[0.5, 0.5]);
    let big = s(&[1000.0, 1000.0, 1000.0]);
    for v in big.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let r = s(&[0.0, 3f64.ln()]);
    assert!((r.data()[0] - 0.25).abs() < 1e-15 && (r.data()[1] - 0.75).abs() < 1e-15);
}

proptest! {
    #[test]
    fn softmax_rows_normalize_and_are_shift_invariant(
        rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), shift in -50.0f64..50.0
    ) {
        let x = rand_t(&[rows, cols], seed).map(|v| v * 10.0);
        let y = eval1(x.clone(), |t, v| t.softmax_lastdim(v).unwrap());
        for r in y.data().chunks(cols) {
            let s: f64 = r.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        let ys = eval1(x.map(|v| v + shift), |t, v| t.softmax_lastdim(v).unwrap());
        prop_assert!(y.max_abs_diff(&ys).unwrap() < 1e-6);
    }
}

// ── conv2d ───────────────────────────────────────────────────────────

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k - 1) / 2;
    let ho = h.div_ceil(stride);
    let wo = wd.div_ceil(stride);
    let mut out = vec![0.0; n * co * ho * wo];
    for ni in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.get(&[ni, c, iy as usize, ix as usize]).unwrap()
                                        * w.get(&[o, c, ky, kx]).unwrap();
                                }
                            }
                        }
                    }
                    out[((ni * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (vec![n, co, ho, wo], out)
}

#[test]
fn conv_identity_kernel() {
    let x = rand_t(&[2, 1, 5, 4], 21);
    let mut t = Tape::new();
    let vx = t.constant(x.clone());
    let w = t.constant(Tensor::ones(&[1, 1, 1, 1]));
    let y = t.conv2d(vx, w, None, 1).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn conv_constant_field_interior() {
    let c = 1.75;
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::full(&[1, 1, 5, 5], c));
    let w = t.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = t.conv2d(x, w, None, 1).unwrap();
    assert_eq!(t.value(y).get(&[0, 0, 2, 2]).unwrap(), 9.0 * c);
    // Corner sees zero padding.
    assert_eq!(t.value(y).get(&[0, 0, 0, 0]).unwrap(), 4.0 * c);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    for stride in [1, 2] {
        let x = rand_t(&[1, 2, 6, 6], 22);
        let w = rand_t(&[3, 2, 3, 3], 23);
        let b = rand_t(&[3], 24);
        let mut t = Tape::new();
        let (vx, vw, vb) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(vx, vw, Some(vb), stride).unwrap();
        let (shape, expect) = conv_oracle(&x, &w, b.data(), stride);
        assert_eq!(t.value(y).shape(), &shape[..]);
        assert_rel(t.value(y).data(), &expect, 1e-6);
    }
}

#[test]
fn conv_odd_extent_same_padding_shapes() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 7, 5]));
    let w = t.constant(Tensor::zeros(&[4, 2, 3, 3]));
    let y = t.conv2d(x, w, None, 2).unwrap();
    assert_eq!(t.shape(y), &[1, 4, 4, 3]);
    let bad = t.constant(Tensor::zeros(&[4, 3, 3, 3]));
    assert!(t.conv2d(x, bad, None, 1).unwrap_err().to_string().contains("channel"));
}

// ── upsample ─────────────────────────────────────────────────────────

#[test]
fn upsample_hand_and_constant_cases() {
    let r = eval1(Tensor::from_f64(&[1, 1, 1, 2], &[0., 1.]).unwrap(), |t, x| {
        t.upsample_bilinear(x, 1, 4).unwrap()
    });
    assert_eq!(r.data(), &[0.0, 0.25, 0.75, 1.0]);
    let c = eval1(Tensor::full(&[2, 3, 3, 5], 5.0), |t, x| t.upsample_bilinear(x, 12, 17).unwrap());
    assert!(c.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(t.upsample_bilinear(x, 0, 4).is_err());
}

fn avg_pool2(x: &Tensor<f64>) -> Tensor<f64> {
    let (p, h, w) = (x.shape()[0] * x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; p * oh * ow];
    for pi in 0..p {
        for y in 0..oh {
            for xx in 0..ow {
                let s = |dy: usize, dx: usize| x.data()[(pi * h + 2 * y + dy) * w + 2 * xx + dx];
                out[(pi * oh + y) * ow + xx] = (s(0, 0) + s(0, 1) + s(1, 0) + s(1, 1)) / 4.0;
            }
        }
    }
    Tensor::new(vec![x.shape()[0], x.shape()[1], oh, ow], out).unwrap()
}

#[test]
fn upsample_then_pool_preserves_coarse_mean() {
    let x = rand_t(&[1, 2, 5, 7], 31);
    let up = eval1(x.clone(), |t, v| t.upsample_bilinear(v, 10, 14).unwrap());
    let pooled = avg_pool2(&up);
    assert!((pooled.mean() - x.mean()).abs() < 1e-5);
}

// ── elementwise ──────────────────────────────────────────────────────

#[test]
fn elementwise_examples() {
    let s = eval1(Tensor::scalar(0.0), |t, x| t.sigmoid(x).unwrap());
    assert_eq!(s.data(), &[0.5]);
    let m = eval1(Tensor::from_f64(&[4], &[1., 2., 3., 6.]).unwrap(), |t, x| t.mean(x).unwrap());
    assert_eq!(m.data(), &[3.0]);
    let x = rand_t(&[17], 41).map(|v| v.abs() * 10.0 + 0.01);
    let round = eval1(x.clone(), |t, v| {
        let l = t.log(v).unwrap();
        t.exp(l).unwrap()
    });
    assert_rel(round.data(), x.data(), 1e-6);
}

#[test]
fn broadcast_leading_expansion_and_scalar() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
    let b = t.constant(Tensor::from_f64(&[3], &[10., 20., 30.]).unwrap());
    let c = t.add(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[10., 21., 32., 13., 24., 35.]);
    let s = t.constant(Tensor::scalar(2.0));
    let d = t.mul(s, a).unwrap();
    assert_eq!(t.value(d).data(), &[0., 2., 4., 6., 8., 10.]);
}

// ── gradients of every primitive ─────────────────────────────────────

fn check(f: impl Fn(&mut Tape<f64>, &[Var]) -> surround_depth::Result<Var>, inputs: &[Tensor<f64>]) {
    let rep = gradcheck(f, inputs, &GradcheckOptions::default()).unwrap();
    assert!(rep.passed, "max rel error {} ({:?})", rep.max_rel_error, rep.inputs);
}

#[test]
fn gradients_of_binary_ops_with_broadcast() {
    let a = rand_t(&[2, 3, 4], 51);
    let b = rand_t(&[3, 1], 52).map(|v| v + 2.0);
    let w = rand_t(&[2, 3, 4], 53);
    for op in 0..4 {
        check(
            |t, v| {
                let r = match op {
                    0 => t.add(v[0], v[1])?,
                    1 => t.sub(v[0], v[1])?,
                    2 => t.mul(v[0], v[1])?,
                    _ => t.div(v[0], v[1])?,
                };
                let r = t.mul(r, v[2])?;
                t.sum(r)
            },
            &[a.clone(), b.clone(), w.clone()],
        );
    }
}

#[test]
fn gradients_of_unary_ops() {
    let x = rand_t(&[3, 5], 61);
    let pos = x.map(|v| v.abs() + 0.2);
    let w = rand_t(&[3, 5], 62);
    type U = fn(&mut Tape<f64>, Var) -> surround_depth::Result<Var>;
    let ops: [(U, bool); 7] = [
        (|t, x| t.abs(x), false),
        (|t, x| t.exp(x), false),
        (|t, x| t.log(x), true),
        (|t, x| t.sigmoid(x), false),
        (|t, x| t.silu(x), false),
        (|t, x| t.scale(x, -2.5), false),
        (|t, x| t.unary(surround_depth::autodiff::UnaryOp::Sqrt, x), true),
    ];
    for (op, needs_pos) in ops {
        let input = if needs_pos { pos.clone() } else { x.clone() };
        check(
            |t, v| {
                let y = op(t, v[0])?;
                let y = t.mul(y, v[1])?;
                t.sum(y)
            },
            &[input, w.clone()],
        );
    }
}

#[test]
fn gradients_of_matmul_variants() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { rand_t(&[2, 4, 3], 71) } else { rand_t(&[2, 3, 4], 71) };
        let b = if tb { rand_t(&[5, 4], 72) } else { rand_t(&[4, 5], 72) };
        let w = rand_t(&[2, 3, 5], 73);
        check(
            |t, v| {
                let m = t.matmul_ex(v[0], v[1], ta, tb, 0.7)?;
                let m = t.mul(m, v[2])?;
                t.sum(m)
            },
            &[a, b, w],
        );
    }
    // Shared lhs, batched rhs.
    check(
        |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let m = t.mul(m, m)?;
            t.sum(m)
        },
        &[rand_t(&[3, 4], 74), rand_t(&[2, 4, 2], 75)],
    );
}

#[test]
fn gradients_of_softmax_conv_upsample() {
    let w = rand_t(&[3, 6], 81);
    check(
        |t, v| {
            let s = t.softmax_lastdim(v[0])?;
            let s = t.mul(s, v[1])?;
            t.sum(s)
        },
        &[rand_t(&[3, 6], 82), w],
    );
    for stride in [1, 2] {
        let w2 = rand_t(&[2, 3, 3, 3], 84);
        let ho = 5usize.div_ceil(stride);
        let wo = 6usize.div_ceil(stride);
        check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride)?;
                let y = t.mul(y, v[3])?;
                t.sum(y)
            },
            &[rand_t(&[2, 3, 5, 6], 83), w2, rand_t(&[2], 85), rand_t(&[2, 2, ho, wo], 86)],
        );
    }
    check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        },
        &[rand_t(&[1, 3, 4, 4], 87), rand_t(&[2, 3, 1, 1], 88), rand_t(&[2], 89)],
    );
    check(
        |t, v| {
            let y = t.upsample_bilinear(v[0], 7, 10)?;
            let y = t.mul(y, v[1])?;
            t.sum(y)
        },
        &[rand_t(&[1, 2, 3, 4], 90), rand_t(&[1, 2, 7, 10], 91)],
    );
}

#[test]
fn gradients_of_layout_ops_and_reductions() {
    check(
        |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            let r = t.reshape(p, &[4, 6])?;
            let c = t.concat(&[r, v[1]], 0)?;
            let s = t.slice(c, 1, 1, 5)?;
            let g = t.gather_axis0(s, &[5, 0, 0, 2])?;
            let g = t.mul(g, g)?;
            let m = t.mean_axes(g, &[1])?;
            let m = t.mul(m, m)?;
            t.sum(m)
        },
        &[rand_t(&[2, 3, 4], 92), rand_t(&[2, 6], 93)],
    );
}

#[test]
fn primitives_are_deterministic() {
    let run = || {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(rand_t(&[2, 3, 8, 8], 101).cast());
        let w = t.leaf(rand_t(&[4, 3, 3, 3], 102).cast());
        let y = t.conv2d(x, w, None, 2).unwrap();
        let y = t.reshape(y, &[2, 4, 16]).unwrap();
        let a = t.matmul_ex(y, y, true, false, 0.25).unwrap();
        let s = t.softmax_lastdim(a).unwrap();
        let l = t.sum(s).unwrap();
        let l2 = t.mul(l, l).unwrap();
        t.backward(l2).unwrap();
        (t.value(s).clone(), t.grad(w).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(ga, gb);
}
