//! Finite-difference checks of the micro model at 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{decode, encode, exchange, forward, init_params, ModelConfig};
use crate::attention::AttentionStackConfig;
use crate::autodiff::gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::loss::depth_loss;
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;

/// Three 16x16 views, eight channels, two attention layers per scale.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        c_f: 8,
        n_views: 3,
        attention: AttentionStackConfig {
            z: 2,
            ..AttentionStackConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub const MICRO_SIZE: usize = 16;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradcheckReport,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn weighted_sum(tape: &mut Tape<f64>, xs: &[Var], weights: &[Tensor<f64>]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (&x, w) in xs.iter().zip(weights) {
        let w = tape.constant(w.clone());
        let y = tape.mul(x, w)?;
        let s = tape.sum(y)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.expect("at least one output"))
}

struct Subset {
    names: Vec<String>,
}

impl Subset {
    fn new(params: &ParamStore<f64>, keep: impl Fn(&str) -> bool) -> Self {
        Subset {
            names: params.names().filter(|n| keep(n)).map(str::to_string).collect(),
        }
    }

    fn tensors(&self, params: &ParamStore<f64>) -> Vec<Tensor<f64>> {
        self.names.iter().map(|n| params.get(n).expect("known name").clone()).collect()
    }

    /// Checked names as leaves from `vars`, every other parameter frozen.
    fn bind(&self, tape: &mut Tape<f64>, params: &ParamStore<f64>, vars: &[Var]) -> BoundParams {
        let mut all: Vec<(String, Var)> = self.names.iter().cloned().zip(vars.iter().copied()).collect();
        for (name, t) in params.iter() {
            if !self.names.iter().any(|n| n == name) {
                all.push((name.to_string(), tape.constant(t.clone())));
            }
        }
        all.into_iter().collect()
    }
}

/// Runs the encoder, attention stack, decoder and end-to-end checks.
/// `entries_per_tensor` bounds how many entries of each input are perturbed.
pub fn run_suite(seed: u64, entries_per_tensor: Option<usize>) -> Result<Vec<SuiteEntry>> {
    let cfg = micro_config();
    let n = cfg.n_views;
    let c = cfg.c_f;
    let s = MICRO_SIZE;
    let params = init_params::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let opts = GradcheckOptions {
        max_entries_per_input: entries_per_tensor,
        ..GradcheckOptions::default()
    };
    let images = random(&mut rng, &[n, cfg.in_channels, s, s], -1.0, 1.0);
    let level_shapes: Vec<[usize; 4]> = [2, 2, 4, 8, 16].iter().map(|f| [n, c, s / f, s / f]).collect();
    let level_weights: Vec<Tensor<f64>> = level_shapes.iter().map(|sh| random(&mut rng, sh, -1.0, 1.0)).collect();
    let pyramid: Vec<Tensor<f64>> = level_shapes.iter().map(|sh| random(&mut rng, sh, -1.0, 1.0)).collect();
    let mut entries = Vec::new();

    let enc = Subset::new(&params, |n| n.starts_with("enc."));
    let mut inputs = vec![images.clone()];
    inputs.extend(enc.tensors(&params));
    let report = gradcheck(
        |tape, vars| {
            let bound = enc.bind(tape, &params, &vars[1..]);
            let pyr = encode(tape, vars[0], &bound, &cfg)?;
            weighted_sum(tape, &pyr, &level_weights)
        },
        &inputs,
        &opts,
    )?;
    entries.push(SuiteEntry { name: "encoder", report });

    let stack = Subset::new(&params, |n| n.starts_with("attn."));
    let mut inputs = pyramid.clone();
    inputs.extend(stack.tensors(&params));
    let report = gradcheck(
        |tape, vars| {
            let bound = stack.bind(tape, &params, &vars[5..]);
            let mut pyr = vars[..5].to_vec();
            exchange(tape, &mut pyr, &bound, &cfg, false)?;
            weighted_sum(tape, &pyr, &level_weights)
        },
        &inputs,
        &opts,
    )?;
    entries.push(SuiteEntry {
        name: "attention stack",
        report,
    });

    let dec = Subset::new(&params, |n| n.starts_with("dec."));
    let dec_shapes: Vec<[usize; 4]> = [16, 8, 4, 2].iter().map(|f| [n, c, s / f, s / f]).collect();
    let dec_weights: Vec<Tensor<f64>> = dec_shapes.iter().map(|sh| random(&mut rng, sh, -1.0, 1.0)).collect();
    let mut inputs = pyramid.clone();
    inputs.extend(dec.tensors(&params));
    let report = gradcheck(
        |tape, vars| {
            let bound = dec.bind(tape, &params, &vars[5..]);
            let feats = decode(tape, &vars[..5], &bound, &cfg)?;
            weighted_sum(tape, &feats, &dec_weights)
        },
        &inputs,
        &opts,
    )?;
    entries.push(SuiteEntry { name: "decoder", report });

    // The smoothness term is left out: at this size the coarsest map is
    // 1x1, so its upsampled differences sit exactly on the kink of |x|.
    // Dividing by d_max keeps the objective near unit scale.
    let all = Subset::new(&params, |_| true);
    let gt = random(&mut rng, &[n, s, s], 1.0, cfg.d_max);
    let depth_weights: Vec<Tensor<f64>> = (0..4).map(|_| random(&mut rng, &[n, s, s], -0.02, 0.02)).collect();
    let report = gradcheck(
        |tape, vars| {
            let bound = all.bind(tape, &params, vars);
            let fw = forward(tape, &images, &bound, &cfg)?;
            let l1 = depth_loss(tape, fw.final_depth(), &gt)?;
            let w = weighted_sum(tape, &fw.depth, &depth_weights)?;
            let f = tape.add(l1, w)?;
            tape.scale(f, 1.0 / cfg.d_max)
        },
        &all.tensors(&params),
        &opts,
    )?;
    entries.push(SuiteEntry {
        name: "end to end",
        report,
    });
    Ok(entries)
}
