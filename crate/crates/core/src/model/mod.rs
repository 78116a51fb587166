//! Shared-weight surround-view depth network: a conv/attention encoder
//! producing a five-level pyramid, the cross-view attention stack, a
//! coarse-to-fine decoder with skips, and sigmoid depth heads.

pub mod checkpoint;
pub mod gradsuite;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_stack, init_attention_params, init_stack_params, map_to_tokens, self_attention, tokens_to_map,
    AttentionParams, AttentionStackConfig, BlockOptions, StackOptions,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, BoundParams, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output scales, finest first, as downsampling factors.
pub const OUTPUT_SCALES: [usize; 4] = [2, 4, 8, 16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub c_f: usize,
    pub n_views: usize,
    pub d_max: f64,
    pub in_channels: usize,
    pub attention: AttentionStackConfig,
    pub use_adjacent_attention: bool,
    /// With adjacent attention off, still run the self-attention rounds.
    pub keep_self_attention: bool,
    pub residuals: bool,
    /// Test switch: feed zeros instead of encoder features to the decoder.
    pub skip_connections: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c_f: 32,
            n_views: 6,
            d_max: 80.0,
            in_channels: 1,
            attention: AttentionStackConfig::default(),
            use_adjacent_attention: true,
            keep_self_attention: true,
            residuals: true,
            skip_connections: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_max > 0.0 && self.d_max.is_finite()) {
            return Err(Error::config(format!("d_max must be positive, got {}", self.d_max)));
        }
        if self.c_f == 0 || self.in_channels == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        if self.use_adjacent_attention && self.n_views < 2 {
            return Err(Error::config(format!(
                "adjacent attention needs at least 2 views, got {}",
                self.n_views
            )));
        }
        self.attention.validate(self.c_f)
    }

    fn runs_stack(&self) -> bool {
        self.use_adjacent_attention || self.keep_self_attention
    }
}

fn conv_param<T: Scalar>(store: &mut ParamStore<T>, name: &str, cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    store.insert(format!("{name}.w"), uniform(rng, &[cout, cin, k, k], bound));
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

/// Deterministic initial parameters for `cfg`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.c_f;
    let mut ps = ParamStore::new();
    conv_param(&mut ps, "enc.stage1.conv1", c, cfg.in_channels, 3, &mut rng);
    conv_param(&mut ps, "enc.stage1.conv2", c, c, 3, &mut rng);
    for i in 2..=5 {
        let p = format!("enc.stage{i}");
        conv_param(&mut ps, &format!("{p}.down"), c, c, 3, &mut rng);
        conv_param(&mut ps, &format!("{p}.local"), c, c, 3, &mut rng);
        init_attention_params(&mut ps, &format!("{p}.attn"), c, &mut rng);
        conv_param(&mut ps, &format!("{p}.ffn1"), 2 * c, c, 1, &mut rng);
        conv_param(&mut ps, &format!("{p}.ffn2"), c, 2 * c, 1, &mut rng);
    }
    if cfg.runs_stack() {
        init_stack_params(&mut ps, &cfg.attention, c, cfg.use_adjacent_attention, &mut rng);
    }
    conv_param(&mut ps, "dec.scale16", c, c, 3, &mut rng);
    for s in [8, 4, 2] {
        conv_param(&mut ps, &format!("dec.scale{s}"), c, 2 * c, 3, &mut rng);
    }
    for s in OUTPUT_SCALES {
        conv_param(&mut ps, &format!("head.scale{s}"), 1, c, 1, &mut rng);
    }
    Ok(ps)
}

fn conv<T: Scalar>(tape: &mut Tape<T>, x: Var, params: &BoundParams, name: &str, stride: usize) -> Result<Var> {
    let w = params.get(&format!("{name}.w"))?;
    let b = params.get(&format!("{name}.b"))?;
    tape.conv2d(x, w, Some(b), stride)
}

fn conv_silu<T: Scalar>(tape: &mut Tape<T>, x: Var, params: &BoundParams, name: &str, stride: usize) -> Result<Var> {
    let y = conv(tape, x, params, name, stride)?;
    tape.silu(y)
}

/// Zero mean, unit variance per `[C, H, W]` image.
pub fn normalize_images<T: Scalar>(images: &Tensor<T>) -> Tensor<T> {
    let per = images.numel() / images.shape()[0];
    let mut out = images.clone();
    for img in out.data_mut().chunks_mut(per) {
        let n = per as f64;
        let mean = img.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = img.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for v in img.iter_mut() {
            *v = T::from_f64_lossy((v.as_f64() - mean) * inv);
        }
    }
    out
}

fn check_input(shape: &[usize], cfg: &ModelConfig) -> Result<()> {
    let [n, c, h, w] = *shape else {
        return Err(Error::dim(format!("images must be [views, channels, H, W], got {shape:?}")));
    };
    if n != cfg.n_views {
        return Err(Error::config(format!("input has {n} views but the model expects {}", cfg.n_views)));
    }
    if c != cfg.in_channels {
        return Err(Error::dim(format!("input has {c} channels but the model expects {}", cfg.in_channels)));
    }
    if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return Err(Error::dim(format!(
            "input extents {h}x{w} must be multiples of 16; pad the images first"
        )));
    }
    Ok(())
}

/// Joint block: `h = x + local(x) + global(x)`, then `h + ffn(h)`.
fn joint_block<T: Scalar>(tape: &mut Tape<T>, x: Var, params: &BoundParams, prefix: &str, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let local = conv_silu(tape, x, params, &format!("{prefix}.local"), 1)?;
    let tokens = map_to_tokens(tape, x)?;
    let ap = AttentionParams::from_bound(params, &format!("{prefix}.attn"))?;
    let global = self_attention(tape, tokens, &ap, &BlockOptions::new(heads, false))?.out;
    let global = tokens_to_map(tape, global, s[2], s[3])?;
    let h = tape.add(x, local)?;
    let h = tape.add(h, global)?;
    let f = conv_silu(tape, h, params, &format!("{prefix}.ffn1"), 1)?;
    let f = conv(tape, f, params, &format!("{prefix}.ffn2"), 1)?;
    tape.add(h, f)
}

/// Five-level pyramid `[F1, F2, F3, F4, F5]` at 1/2, 1/2, 1/4, 1/8, 1/16.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, images: Var, params: &BoundParams, cfg: &ModelConfig) -> Result<Vec<Var>> {
    check_input(tape.shape(images), cfg)?;
    let f1 = conv_silu(tape, images, params, "enc.stage1.conv1", 2)?;
    let f1 = conv_silu(tape, f1, params, "enc.stage1.conv2", 1)?;
    let mut pyramid = vec![f1];
    for i in 2..=5 {
        let prefix = format!("enc.stage{i}");
        let stride = if i == 2 { 1 } else { 2 };
        let prev = *pyramid.last().expect("pyramid starts non-empty");
        let d = conv(tape, prev, params, &format!("{prefix}.down"), stride)?;
        pyramid.push(joint_block(tape, d, params, &prefix, cfg.attention.n_heads)?);
    }
    Ok(pyramid)
}

/// Pyramid index holding the features at `scale`.
fn level_of(scale: usize) -> usize {
    match scale {
        2 => 1,
        4 => 2,
        8 => 3,
        _ => 4,
    }
}

/// Runs the cross-view attention stack on the configured pyramid levels.
pub fn exchange<T: Scalar>(
    tape: &mut Tape<T>,
    pyramid: &mut [Var],
    params: &BoundParams,
    cfg: &ModelConfig,
    capture_probs: bool,
) -> Result<Vec<Var>> {
    let mut probs = Vec::new();
    if !cfg.runs_stack() {
        return Ok(probs);
    }
    let opts = StackOptions {
        cfg: &cfg.attention,
        use_adjacent: cfg.use_adjacent_attention,
        residual: cfg.residuals,
        capture_probs,
    };
    for &s in &cfg.attention.scales {
        let lvl = level_of(s);
        let out = attention_stack(tape, pyramid[lvl], s, params, opts)?;
        pyramid[lvl] = out.out;
        probs.extend(out.probs);
    }
    Ok(probs)
}

/// Decoder features coarse to fine: scales 16, 8, 4, 2.
pub fn decode<T: Scalar>(tape: &mut Tape<T>, pyramid: &[Var], params: &BoundParams, cfg: &ModelConfig) -> Result<Vec<Var>> {
    if pyramid.len() != 5 {
        return Err(Error::dim(format!("decoder expects 5 pyramid levels, got {}", pyramid.len())));
    }
    let mut feats = vec![conv_silu(tape, pyramid[4], params, "dec.scale16", 1)?];
    for (s, lvl) in [(8, 3), (4, 2), (2, 1)] {
        let skip = pyramid[lvl];
        let shape = tape.shape(skip).to_vec();
        let prev = *feats.last().expect("decoder starts non-empty");
        let up = tape.upsample_bilinear(prev, shape[2], shape[3])?;
        let skip = if cfg.skip_connections {
            skip
        } else {
            tape.constant(Tensor::zeros(&shape))
        };
        let cat = tape.concat(&[up, skip], 1)?;
        feats.push(conv_silu(tape, cat, params, &format!("dec.scale{s}"), 1)?);
    }
    Ok(feats)
}

/// `sigmoid(1x1 conv(x)) * d_max`, shape `[N, 1, h, w]`.
pub fn depth_head<T: Scalar>(tape: &mut Tape<T>, feat: Var, w: Var, b: Var, d_max: f64) -> Result<Var> {
    let z = tape.conv2d(feat, w, Some(b), 1)?;
    let s = tape.sigmoid(z)?;
    tape.scale(s, d_max)
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub pyramid: Vec<Var>,
    /// Decoder features, scales 16, 8, 4, 2.
    pub decoder: Vec<Var>,
    /// Depth maps `[N, H, W]` upsampled from scales 2, 4, 8, 16.
    pub depth: Vec<Var>,
    pub attention_probs: Vec<Var>,
}

impl Forward {
    pub fn final_depth(&self) -> Var {
        self.depth[0]
    }
}

/// Full forward pass on raw `[N, Cin, H, W]` images.
pub fn forward<T: Scalar>(tape: &mut Tape<T>, images: &Tensor<T>, params: &BoundParams, cfg: &ModelConfig) -> Result<Forward> {
    forward_traced(tape, images, params, cfg, false)
}

/// [`forward`], optionally recording the stack's attention probabilities.
pub fn forward_traced<T: Scalar>(
    tape: &mut Tape<T>,
    images: &Tensor<T>,
    params: &BoundParams,
    cfg: &ModelConfig,
    capture_probs: bool,
) -> Result<Forward> {
    check_input(images.shape(), cfg)?;
    let (n, h, w) = (images.shape()[0], images.shape()[2], images.shape()[3]);
    let x = tape.constant(normalize_images(images));
    let mut pyramid = encode(tape, x, params, cfg)?;
    let attention_probs = exchange(tape, &mut pyramid, params, cfg, capture_probs)?;
    let decoder = decode(tape, &pyramid, params, cfg)?;
    let mut depth = Vec::with_capacity(4);
    for (i, s) in OUTPUT_SCALES.iter().enumerate() {
        let feat = decoder[3 - i];
        let hw = params.get(&format!("head.scale{s}.w"))?;
        let hb = params.get(&format!("head.scale{s}.b"))?;
        let d = depth_head(tape, feat, hw, hb, cfg.d_max)?;
        let d = tape.upsample_bilinear(d, h, w)?;
        depth.push(tape.reshape(d, &[n, h, w])?);
    }
    Ok(Forward {
        pyramid,
        decoder,
        depth,
        attention_probs,
    })
}

/// Inference helper: final-scale depth `[N, H, W]` with parameters frozen.
pub fn predict<T: Scalar>(params: &ParamStore<T>, images: &Tensor<T>, cfg: &ModelConfig) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let f = forward(&mut tape, images, &bound, cfg)?;
    Ok(f.depth.iter().map(|&d| tape.value(d).clone()).collect())
}
