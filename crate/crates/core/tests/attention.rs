//! Attention blocks against explicit per-head loop oracles, plus the ring
//! symmetry properties of the stacked self/adjacent alternation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surround_depth::attention::{
    adjacent_attention, attention_stack, attention_stack_tokens, init_attention_params, init_stack_params,
    self_attention, AttentionParams, BlockOptions, AttentionStackConfig, NeighborMode, StackOptions,
};
use surround_depth::autodiff::gradcheck::{gradcheck, GradcheckOptions};
use surround_depth::{BoundParams, Error, ParamStore, Tape, Tensor, Var};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn block_store(c: usize, seed: u64, random_biases: bool) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    init_attention_params(&mut ps, "blk", c, &mut rng);
    if random_biases {
        for b in ["bq", "bk", "bv", "bo"] {
            ps.insert(format!("blk.{b}"), rand_tensor(&mut rng, &[c]));
        }
    }
    ps
}

struct Dense {
    w: Vec<f64>,
    b: Vec<f64>,
    c: usize,
}

impl Dense {
    fn from(ps: &ParamStore<f64>, w: &str, b: &str) -> Self {
        let w = ps.get(&format!("blk.{w}")).unwrap();
        Dense {
            c: w.shape()[0],
            w: w.data().to_vec(),
            b: ps.get(&format!("blk.{b}")).unwrap().data().to_vec(),
        }
    }

    /// Row-token affine map: `y[o] = sum_i w[o][i] x[i] + b[o]`.
    fn apply(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|x| (0..self.c).map(|o| (0..self.c).map(|i| self.w[o * self.c + i] * x[i]).sum::<f64>() + self.b[o]).collect())
            .collect()
    }
}

/// One view's attention with queries from `q_rows` and keys/values from `kv_rows`,
/// before the output projection.
fn oracle_mix(ps: &ParamStore<f64>, heads: usize, q_rows: &[Vec<f64>], kv_rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let q = Dense::from(ps, "wq", "bq").apply(q_rows);
    let k = Dense::from(ps, "wk", "bk").apply(kv_rows);
    let v = Dense::from(ps, "wv", "bv").apply(kv_rows);
    let c = q[0].len();
    let d = c / heads;
    let t = q_rows.len();
    let mut out = vec![vec![0.0; c]; t];
    for h in 0..heads {
        let lo = h * d;
        for i in 0..t {
            let s: Vec<f64> = (0..t)
                .map(|j| (lo..lo + d).map(|x| q[i][x] * k[j][x]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..t {
                for x in lo..lo + d {
                    out[i][x] += e[j] / z * v[j][x];
                }
            }
        }
    }
    out
}

fn oracle_finish(ps: &ParamStore<f64>, mixed: &[Vec<f64>], residual: Option<&[Vec<f64>]>) -> Vec<Vec<f64>> {
    let mut y = Dense::from(ps, "wo", "bo").apply(mixed);
    if let Some(r) = residual {
        for (row, rr) in y.iter_mut().zip(r) {
            for (a, b) in row.iter_mut().zip(rr) {
                *a += b;
            }
        }
    }
    y
}

fn opts(heads: usize, residual: bool) -> BlockOptions {
    BlockOptions {
        capture_probs: true,
        ..BlockOptions::new(heads, residual)
    }
}

fn view_rows(x: &Tensor<f64>, view: usize) -> Vec<Vec<f64>> {
    let (t, c) = (x.shape()[1], x.shape()[2]);
    (0..t).map(|i| x.data()[(view * t + i) * c..(view * t + i + 1) * c].to_vec()).collect()
}

fn assert_rel_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        let rel = (g - w).abs() / w.abs().max(1e-8);
        assert!(rel < tol || (g - w).abs() < 1e-12, "entry {i}: {g} vs {w}");
    }
}

fn bind_block(tape: &mut Tape<f64>, ps: &ParamStore<f64>) -> AttentionParams {
    AttentionParams::from_bound(&ps.bind(tape), "blk").unwrap()
}

#[test]
fn single_token_output_is_projected_value_plus_residual() {
    let ps = block_store(4, 1, true);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[1, 1, 4]);
    let mut tape = Tape::new();
    let p = bind_block(&mut tape, &ps);
    let xv = tape.constant(x.clone());
    let out = self_attention(&mut tape, xv, &p, &opts(2, true)).unwrap();
    let rows = view_rows(&x, 0);
    let v = Dense::from(&ps, "wv", "bv").apply(&rows);
    let want = oracle_finish(&ps, &v, Some(&rows));
    assert_rel_close(tape.value(out.out).data(), &want[0], 1e-12);
    assert_eq!(tape.value(out.probs[0]).data(), &[1.0, 1.0]);
}

#[test]
fn zero_query_key_gives_uniform_attention() {
    let c = 4;
    let mut ps = block_store(c, 3, false);
    let eye = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
    ps.insert("blk.wq", Tensor::zeros(&[c, c]));
    ps.insert("blk.wk", Tensor::zeros(&[c, c]));
    ps.insert("blk.wv", eye.clone());
    ps.insert("blk.wo", eye);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[1, 5, c]);
    let mut tape = Tape::new();
    let p = bind_block(&mut tape, &ps);
    let xv = tape.constant(x.clone());
    let out = self_attention(&mut tape, xv, &p, &opts(2, false)).unwrap();
    let rows = view_rows(&x, 0);
    let mean: Vec<f64> = (0..c).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / 5.0).collect();
    for row in view_rows(tape.value(out.out), 0) {
        assert_rel_close(&row, &mean, 1e-12);
    }
    assert!(tape.value(out.probs[0]).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
}

#[test]
fn self_attention_matches_loop_oracle() {
    let (n, t, c, heads) = (3, 5, 8, 2);
    let ps = block_store(c, 5, true);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[n, t, c]);
    for residual in [true, false] {
        let mut tape = Tape::new();
        let p = bind_block(&mut tape, &ps);
        let xv = tape.constant(x.clone());
        let out = self_attention(&mut tape, xv, &p, &opts(heads, residual)).unwrap();
        for j in 0..n {
            let rows = view_rows(&x, j);
            let mixed = oracle_mix(&ps, heads, &rows, &rows);
            let want = oracle_finish(&ps, &mixed, residual.then_some(&rows[..]));
            assert_rel_close(&view_rows(tape.value(out.out), j).concat(), &want.concat(), 1e-5);
        }
    }
}

#[test]
fn adjacent_attention_matches_role_swapped_oracle() {
    let (n, t, c, heads) = (2, 4, 6, 3);
    let ps = block_store(c, 7, true);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (xc, xl, xr) = (
        rand_tensor(&mut rng, &[n, t, c]),
        rand_tensor(&mut rng, &[n, t, c]),
        rand_tensor(&mut rng, &[n, t, c]),
    );
    let mut tape = Tape::new();
    let p = bind_block(&mut tape, &ps);
    let (vc, vl, vr) = (tape.constant(xc.clone()), tape.constant(xl.clone()), tape.constant(xr.clone()));
    let out = adjacent_attention(&mut tape, vc, vl, vr, &p, NeighborMode::BothAveraged, &opts(heads, true)).unwrap();
    assert_eq!(out.probs.len(), 2);
    for j in 0..n {
        let centre = view_rows(&xc, j);
        let l = oracle_mix(&ps, heads, &view_rows(&xl, j), &centre);
        let r = oracle_mix(&ps, heads, &view_rows(&xr, j), &centre);
        let avg: Vec<Vec<f64>> = l.iter().zip(&r).map(|(a, b)| a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()).collect();
        let want = oracle_finish(&ps, &avg, Some(&centre));
        assert_rel_close(&view_rows(tape.value(out.out), j).concat(), &want.concat(), 1e-5);
    }
}

#[test]
fn identical_neighbours_reduce_to_self_attention() {
    let ps = block_store(8, 9, true);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[2, 6, 8]);
    let mut tape = Tape::new();
    let p = bind_block(&mut tape, &ps);
    let xv = tape.constant(x);
    let s = self_attention(&mut tape, xv, &p, &opts(2, true)).unwrap();
    let a = adjacent_attention(&mut tape, xv, xv, xv, &p, NeighborMode::BothAveraged, &opts(2, true)).unwrap();
    assert!(tape.value(s.out).max_abs_diff(tape.value(a.out)).unwrap() < 1e-12);
}

#[test]
fn one_sided_modes_average_to_both() {
    let c = 4;
    let mut ps = block_store(c, 11, true);
    // Identity output projection exposes the pre-projection mix.
    ps.insert("blk.wo", Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 }));
    ps.insert("blk.bo", Tensor::zeros(&[c]));
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let xs: Vec<Tensor<f64>> = (0..3).map(|_| rand_tensor(&mut rng, &[3, 5, c])).collect();
    let mut tape = Tape::new();
    let p = bind_block(&mut tape, &ps);
    let v: Vec<Var> = xs.into_iter().map(|x| tape.constant(x)).collect();
    let run = |tape: &mut Tape<f64>, mode| adjacent_attention(tape, v[0], v[1], v[2], &p, mode, &opts(2, false)).unwrap().out;
    let l = run(&mut tape, NeighborMode::LeftOnly);
    let r = run(&mut tape, NeighborMode::RightOnly);
    let both = run(&mut tape, NeighborMode::BothAveraged);
    let avg: Vec<f64> = tape.value(l).data().iter().zip(tape.value(r).data()).map(|(a, b)| (a + b) * 0.5).collect();
    assert_eq!(tape.value(both).data(), &avg[..]);
}

fn stack_store(cfg: &AttentionStackConfig, c: usize, use_adjacent: bool, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    init_stack_params(&mut ps, cfg, c, use_adjacent, &mut rng);
    // Nonzero biases exercise every parameter.
    let names: Vec<String> = ps.names().filter(|n| n.contains(".b")).map(str::to_string).collect();
    for n in names {
        ps.insert(n, Tensor::from_fn(&[c], |_| rng.gen_range(-0.3..0.3)));
    }
    ps
}

fn cfg(z: usize, mode: NeighborMode) -> AttentionStackConfig {
    AttentionStackConfig {
        z,
        scales: vec![4],
        n_heads: 2,
        neighbor_mode: mode,
        positional_encoding: false,
    }
}

fn run_stack(ps: &ParamStore<f64>, cfg: &AttentionStackConfig, x: &Tensor<f64>, use_adjacent: bool) -> Tensor<f64> {
    let mut tape = Tape::new();
    let bound = ps.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let opts = StackOptions {
        cfg,
        use_adjacent,
        residual: true,
        capture_probs: true,
    };
    let out = attention_stack_tokens(&mut tape, xv, 4, &bound, opts).unwrap();
    tape.value(out.out).clone()
}

#[test]
fn two_view_ring_is_mutual_cross_attention() {
    let c = 4;
    let config = cfg(1, NeighborMode::BothAveraged);
    let ps = stack_store(&config, c, true, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&mut rng, &[2, 3, c]);
    let got = run_stack(&ps, &config, &x, true);

    let sub = |kind: &str| {
        let mut b = ParamStore::new();
        for s in ["wq", "wk", "wv", "bq", "bk", "bv", "wo", "bo"] {
            b.insert(format!("blk.{s}"), ps.get(&format!("attn.scale4.layer0.{kind}.{s}")).unwrap().clone());
        }
        b
    };
    let (sp, ap) = (sub("self"), sub("adj"));
    let sf: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|j| {
            let rows = view_rows(&x, j);
            oracle_finish(&sp, &oracle_mix(&sp, 2, &rows, &rows), Some(&rows))
        })
        .collect();
    for j in 0..2 {
        let other = &sf[1 - j];
        // Both ring neighbours are the other view, so the average is a single cross pass.
        let mixed = oracle_mix(&ap, 2, other, &sf[j]);
        let want = oracle_finish(&ap, &mixed, Some(&sf[j]));
        assert_rel_close(&view_rows(&got, j).concat(), &want.concat(), 1e-5);
    }
}

#[test]
fn disabling_adjacent_leaves_pure_self_rounds() {
    let c = 4;
    let config = cfg(3, NeighborMode::BothAveraged);
    let ps = stack_store(&config, c, false, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_tensor(&mut rng, &[1, 5, c]);
    let got = run_stack(&ps, &config, &x, false);

    let mut tape = Tape::new();
    let bound = ps.bind(&mut tape);
    let mut h = tape.constant(x);
    for z in 0..3 {
        let p = AttentionParams::from_bound(&bound, &format!("attn.scale4.layer{z}.self")).unwrap();
        h = self_attention(&mut tape, h, &p, &opts(2, true)).unwrap().out;
    }
    assert_eq!(tape.value(h), &got);
}

fn rotate_views(x: &Tensor<f64>, k: usize) -> Tensor<f64> {
    let n = x.shape()[0];
    x.gather_axis0(&(0..n).map(|j| (j + k) % n).collect::<Vec<_>>()).unwrap()
}

fn reflect_views(x: &Tensor<f64>) -> Tensor<f64> {
    let n = x.shape()[0];
    x.gather_axis0(&(0..n).rev().collect::<Vec<_>>()).unwrap()
}

#[test]
fn stack_is_cyclically_equivariant() {
    let (n, c) = (5, 4);
    for pe in [false, true] {
        let mut config = cfg(2, NeighborMode::BothAveraged);
        config.positional_encoding = pe;
        let ps = stack_store(&config, c, true, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = rand_tensor(&mut rng, &[n, 4, c]);
        let base = run_stack(&ps, &config, &x, true);
        for k in 0..n {
            let rotated = run_stack(&ps, &config, &rotate_views(&x, k), true);
            assert!(rotated.max_abs_diff(&rotate_views(&base, k)).unwrap() < 1e-5, "k={k}, pe={pe}");
        }
    }
}

#[test]
fn reflection_equivariance_only_in_averaged_mode() {
    let (n, c) = (4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = rand_tensor(&mut rng, &[n, 3, c]);
    let gap = |mode| {
        let config = cfg(2, mode);
        let ps = stack_store(&config, c, true, 20);
        let base = run_stack(&ps, &config, &x, true);
        let mirrored = run_stack(&ps, &config, &reflect_views(&x), true);
        mirrored.max_abs_diff(&reflect_views(&base)).unwrap()
    };
    assert!(gap(NeighborMode::BothAveraged) < 1e-5);
    assert!(gap(NeighborMode::LeftOnly) > 1e-3, "negative control must break the symmetry");
}

#[test]
fn every_probability_matrix_is_row_stochastic() {
    let c = 8;
    let config = cfg(2, NeighborMode::BothAveraged);
    let ps = stack_store(&config, c, true, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let map = rand_tensor(&mut rng, &[3, c, 3, 4]);
    let mut tape = Tape::new();
    let bound = ps.bind(&mut tape);
    let mv = tape.constant(map.clone());
    let opts = StackOptions {
        cfg: &config,
        use_adjacent: true,
        residual: true,
        capture_probs: true,
    };
    let out = attention_stack(&mut tape, mv, 4, &bound, opts).unwrap();
    assert_eq!(tape.shape(out.out), map.shape());
    // Two rounds of one self and two neighbour passes.
    assert_eq!(out.probs.len(), 6);
    for p in &out.probs {
        let t = tape.value(*p);
        assert_eq!(t.shape(), &[3, 2, 12, 12]);
        for row in t.data().chunks(12) {
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn stack_gradients_pass_finite_differences() {
    let (n, t, c) = (3, 4, 4);
    let config = cfg(2, NeighborMode::BothAveraged);
    let ps = stack_store(&config, c, true, 23);
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut inputs = vec![rand_tensor(&mut rng, &[n, t, c])];
    inputs.extend(names.iter().map(|k| ps.get(k).unwrap().clone()));
    let weights = rand_tensor(&mut rng, &[n, t, c]);
    let report = gradcheck(
        |tape, vars| {
            let bound: BoundParams = names.iter().cloned().zip(vars[1..].iter().copied()).collect();
            let opts = StackOptions {
                cfg: &config,
                use_adjacent: true,
                residual: true,
                capture_probs: false,
            };
            let out = attention_stack_tokens(tape, vars[0], 4, &bound, opts)?.out;
            let w = tape.constant(weights.clone());
            let y = tape.mul(out, w)?;
            tape.sum(y)
        },
        &inputs,
        &GradcheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "max rel error {}", report.max_rel_error);
}

#[test]
fn shape_and_config_errors() {
    let ps = block_store(8, 25, false);
    let mut tape = Tape::new();
    let p = bind_block(&mut tape, &ps);
    let narrow = tape.constant(Tensor::zeros(&[1, 3, 6]));
    assert!(matches!(self_attention(&mut tape, narrow, &p, &opts(2, true)), Err(Error::Dimension(_))));
    let flat = tape.constant(Tensor::zeros(&[3, 8]));
    assert!(matches!(self_attention(&mut tape, flat, &p, &opts(2, true)), Err(Error::Dimension(_))));
    let a = tape.constant(Tensor::zeros(&[2, 3, 8]));
    let b = tape.constant(Tensor::zeros(&[2, 4, 8]));
    let err = adjacent_attention(&mut tape, a, b, a, &p, NeighborMode::BothAveraged, &opts(2, true)).unwrap_err();
    assert!(matches!(err, Error::Dimension(ref m) if m.contains("left")));

    let config = cfg(1, NeighborMode::BothAveraged);
    let sps = stack_store(&config, 4, true, 26);
    let mut tape = Tape::new();
    let bound = sps.bind(&mut tape);
    let single = tape.constant(Tensor::zeros(&[1, 3, 4]));
    let opts = StackOptions {
        cfg: &config,
        use_adjacent: true,
        residual: true,
        capture_probs: true,
    };
    assert!(matches!(attention_stack_tokens(&mut tape, single, 4, &bound, opts), Err(Error::Config(_))));
    let opts = StackOptions { use_adjacent: false, ..opts };
    assert!(attention_stack_tokens(&mut tape, single, 4, &bound, opts).is_ok());

    assert!(cfg(0, NeighborMode::BothAveraged).validate(4).is_err());
    assert!(cfg(1, NeighborMode::BothAveraged).validate(5).is_err());
    let mut bad = cfg(1, NeighborMode::BothAveraged);
    bad.scales = vec![3];
    assert!(bad.validate(4).is_err());
    assert!(AttentionStackConfig::default().validate(32).is_ok());
}

#[test]
fn config_serializes_with_snake_case_modes() {
    let c = cfg(2, NeighborMode::LeftOnly);
    let s = serde_json::to_string(&c).unwrap();
    assert!(s.contains("\"left_only\""));
    let back: AttentionStackConfig = serde_json::from_str(&s).unwrap();
    assert_eq!(back, c);
    let partial: AttentionStackConfig = serde_json::from_str("{\"z\": 3}").unwrap();
    assert_eq!(partial.z, 3);
    assert_eq!(partial.neighbor_mode, NeighborMode::BothAveraged);
}
