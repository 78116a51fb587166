//! Multi-head self-attention within a view and cross attention between
//! neighbouring views on the camera ring.
//!
//! Token tensors are laid out `[N, T, C]`: views, tokens, channels. Weights
//! are stored `[C_out, C_in]` and applied as `x Wᵀ + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, BoundParams, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PARAM_SUFFIXES: [&str; 8] = ["wq", "wk", "wv", "bq", "bk", "bv", "wo", "bo"];

/// Pyramid levels, as the downsampling factor relative to the input.
pub const ALL_SCALES: [usize; 4] = [2, 4, 8, 16];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborMode {
    #[default]
    BothAveraged,
    LeftOnly,
    RightOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionStackConfig {
    /// Alternation count: rounds of (self, adjacent).
    pub z: usize,
    pub scales: Vec<usize>,
    pub n_heads: usize,
    pub neighbor_mode: NeighborMode,
    pub positional_encoding: bool,
}

impl Default for AttentionStackConfig {
    fn default() -> Self {
        AttentionStackConfig {
            z: 8,
            scales: ALL_SCALES.to_vec(),
            n_heads: 2,
            neighbor_mode: NeighborMode::BothAveraged,
            positional_encoding: false,
        }
    }
}

impl AttentionStackConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.z == 0 {
            return Err(Error::config("attention alternation count must be at least 1"));
        }
        if let Some(s) = self.scales.iter().find(|s| !ALL_SCALES.contains(s)) {
            return Err(Error::config(format!("attention scale 1/{s} is not a pyramid level")));
        }
        if self.n_heads == 0 || channels % self.n_heads != 0 {
            return Err(Error::config(format!(
                "channel width {channels} is not divisible by {} heads",
                self.n_heads
            )));
        }
        Ok(())
    }
}

/// Tape handles of one attention block's projections.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bq: Var,
    pub bk: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionParams {
    pub fn from_bound(bound: &BoundParams, prefix: &str) -> Result<Self> {
        let g = |s: &str| bound.get(&format!("{prefix}.{s}"));
        Ok(AttentionParams {
            wq: g("wq")?,
            wk: g("wk")?,
            wv: g("wv")?,
            bq: g("bq")?,
            bk: g("bk")?,
            bv: g("bv")?,
            wo: g("wo")?,
            bo: g("bo")?,
        })
    }
}

/// Adds `{prefix}.{wq..bo}`: weights uniform in ±1/√C, biases zero.
pub fn init_attention_params<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, channels: usize, rng: &mut R) {
    let bound = 1.0 / (channels as f64).sqrt();
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{prefix}.{w}"), uniform(rng, &[channels, channels], bound));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.insert(format!("{prefix}.{b}"), Tensor::zeros(&[channels]));
    }
}

pub fn stack_prefix(scale: usize, layer: usize, kind: &str) -> String {
    format!("attn.scale{scale}.layer{layer}.{kind}")
}

pub fn init_stack_params<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    cfg: &AttentionStackConfig,
    channels: usize,
    use_adjacent: bool,
    rng: &mut R,
) {
    for &s in &cfg.scales {
        for z in 0..cfg.z {
            init_attention_params(store, &stack_prefix(s, z, "self"), channels, rng);
            if use_adjacent {
                init_attention_params(store, &stack_prefix(s, z, "adj"), channels, rng);
            }
        }
    }
}

/// Result of one attention block; when captured, `probs` holds the
/// `[N, H, T, T]` probability matrices in the order they were computed.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    pub probs: Vec<Var>,
}

fn tokens_shape<T: Scalar>(tape: &Tape<T>, x: Var, what: &str) -> Result<[usize; 3]> {
    match *tape.shape(x) {
        [n, t, c] => Ok([n, t, c]),
        ref s => Err(Error::dim(format!("{what} must be [views, tokens, channels], got {s:?}"))),
    }
}

fn affine<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul_ex(x, w, false, true, 1.0)?;
    tape.add(y, b)
}

fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let [n, t, c] = tokens_shape(tape, x, "projection")?;
    let r = tape.reshape(x, &[n, t, heads, c / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

fn merge_heads<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || channels % heads != 0 {
        return Err(Error::dim(format!("{channels} channels do not split into {heads} heads")));
    }
    Ok(())
}

/// Per-block switches shared by self and adjacent attention.
#[derive(Clone, Copy, Debug)]
pub struct BlockOptions {
    pub heads: usize,
    pub residual: bool,
    /// Record the probability matrices in [`AttentionOutput::probs`].
    pub capture_probs: bool,
}

impl BlockOptions {
    pub fn new(heads: usize, residual: bool) -> Self {
        BlockOptions {
            heads,
            residual,
            capture_probs: false,
        }
    }
}

/// Attention of queries from `q_src` over keys and values from `kv_src`,
/// heads merged back to `[N, T, C]` but not yet output-projected.
fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    q_src: Var,
    kv_src: Var,
    p: &AttentionParams,
    opts: &BlockOptions,
    probs: &mut Vec<Var>,
) -> Result<Var> {
    let [n, t, c] = tokens_shape(tape, q_src, "query source")?;
    let heads = opts.heads;
    check_heads(c, heads)?;
    let d_head = c / heads;
    let q = affine(tape, q_src, p.wq, p.bq)?;
    let k = affine(tape, kv_src, p.wk, p.bk)?;
    let v = affine(tape, kv_src, p.wv, p.bv)?;
    let mut flat = [q, k, v];
    for x in flat.iter_mut() {
        let h = split_heads(tape, *x, heads)?;
        *x = tape.reshape(h, &[n * heads, t, d_head])?;
    }
    let alpha = 1.0 / (d_head as f64).sqrt();
    let (o, prob) = tape.attention(flat[0], flat[1], flat[2], alpha, opts.capture_probs)?;
    if let Some(prob) = prob {
        probs.push(tape.reshape(prob, &[n, heads, t, t])?);
    }
    let o = tape.reshape(o, &[n, heads, t, d_head])?;
    merge_heads(tape, o)
}

fn project_out<T: Scalar>(tape: &mut Tape<T>, mixed: Var, p: &AttentionParams, residual: Option<Var>) -> Result<Var> {
    let y = affine(tape, mixed, p.wo, p.bo)?;
    match residual {
        Some(r) => tape.add(y, r),
        None => Ok(y),
    }
}

/// Per-view multi-head self-attention over `[N, T, C]` tokens.
pub fn self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &AttentionParams,
    opts: &BlockOptions,
) -> Result<AttentionOutput> {
    let mut probs = Vec::new();
    let mixed = attend(tape, x, x, p, opts, &mut probs)?;
    let out = project_out(tape, mixed, p, opts.residual.then_some(x))?;
    Ok(AttentionOutput { out, probs })
}

/// Cross attention where each neighbour supplies queries and the centre
/// view supplies keys and values.
pub fn adjacent_attention<T: Scalar>(
    tape: &mut Tape<T>,
    centre: Var,
    left: Var,
    right: Var,
    p: &AttentionParams,
    mode: NeighborMode,
    opts: &BlockOptions,
) -> Result<AttentionOutput> {
    let shape = tape.shape(centre).to_vec();
    for (name, v) in [("left", left), ("right", right)] {
        if tape.shape(v) != shape.as_slice() {
            return Err(Error::dim(format!(
                "{name} neighbour shape {:?} differs from centre {shape:?}",
                tape.shape(v)
            )));
        }
    }
    let mut probs = Vec::new();
    let mixed = match mode {
        NeighborMode::LeftOnly => attend(tape, left, centre, p, opts, &mut probs)?,
        NeighborMode::RightOnly => attend(tape, right, centre, p, opts, &mut probs)?,
        NeighborMode::BothAveraged => {
            let l = attend(tape, left, centre, p, opts, &mut probs)?;
            let r = attend(tape, right, centre, p, opts, &mut probs)?;
            let s = tape.add(l, r)?;
            tape.scale(s, 0.5)?
        }
    };
    let out = project_out(tape, mixed, p, opts.residual.then_some(centre))?;
    Ok(AttentionOutput { out, probs })
}

/// Ring neighbours of every view: `(left, right)` = views `j-1`, `j+1` mod N.
pub fn ring_neighbors<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
    let n = tape.shape(x)[0];
    let left: Vec<usize> = (0..n).map(|j| (j + n - 1) % n).collect();
    let right: Vec<usize> = (0..n).map(|j| (j + 1) % n).collect();
    Ok((tape.gather_axis0(x, &left)?, tape.gather_axis0(x, &right)?))
}

/// Sinusoidal `[T, C]` encoding of the token index.
pub fn positional_encoding<T: Scalar>(tokens: usize, channels: usize) -> Tensor<T> {
    Tensor::from_fn(&[tokens, channels], |i| {
        let (t, c) = ((i / channels) as f64, i % channels);
        let freq = 10000f64.powf(-((c / 2 * 2) as f64) / channels as f64);
        T::from_f64_lossy(if c % 2 == 0 { (t * freq).sin() } else { (t * freq).cos() })
    })
}

/// Options shared by every layer of one stack application.
#[derive(Clone, Copy, Debug)]
pub struct StackOptions<'a> {
    pub cfg: &'a AttentionStackConfig,
    pub use_adjacent: bool,
    pub residual: bool,
    pub capture_probs: bool,
}

/// `z` rounds of self then adjacent attention on `[N, T, C]` tokens at one
/// pyramid scale. Without adjacent attention only the self rounds run.
pub fn attention_stack_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    scale: usize,
    params: &BoundParams,
    opts: StackOptions<'_>,
) -> Result<AttentionOutput> {
    let [n, t, c] = tokens_shape(tape, x, "stack input")?;
    if opts.use_adjacent && n < 2 {
        return Err(Error::config(format!(
            "adjacent attention needs at least 2 views, got {n}; disable it to run self-attention only"
        )));
    }
    let block = BlockOptions {
        heads: opts.cfg.n_heads,
        residual: opts.residual,
        capture_probs: opts.capture_probs,
    };
    let mut h = x;
    if opts.cfg.positional_encoding {
        let pe = tape.constant(positional_encoding(t, c));
        h = tape.add(h, pe)?;
    }
    let mut probs = Vec::new();
    for z in 0..opts.cfg.z {
        let sp = AttentionParams::from_bound(params, &stack_prefix(scale, z, "self"))?;
        let s = self_attention(tape, h, &sp, &block)?;
        probs.extend(s.probs);
        h = s.out;
        if opts.use_adjacent {
            let ap = AttentionParams::from_bound(params, &stack_prefix(scale, z, "adj"))?;
            let (l, r) = ring_neighbors(tape, h)?;
            let a = adjacent_attention(tape, h, l, r, &ap, opts.cfg.neighbor_mode, &block)?;
            probs.extend(a.probs);
            h = a.out;
        }
    }
    Ok(AttentionOutput { out: h, probs })
}

/// `[N, C, h, w]` feature map to `[N, h*w, C]` tokens.
pub fn map_to_tokens<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::dim(format!("feature map must be [N, C, H, W], got {s:?}")));
    }
    let r = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    tape.permute(r, &[0, 2, 1])
}

pub fn tokens_to_map<T: Scalar>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let [n, t, c] = tokens_shape(tape, x, "tokens")?;
    if t != h * w {
        return Err(Error::dim(format!("{t} tokens cannot fill a {h}x{w} map")));
    }
    let p = tape.permute(x, &[0, 2, 1])?;
    tape.reshape(p, &[n, c, h, w])
}

/// Applies the stack to a `[N, C, h, w]` map at `scale` and restores the layout.
pub fn attention_stack<T: Scalar>(
    tape: &mut Tape<T>,
    map: Var,
    scale: usize,
    params: &BoundParams,
    opts: StackOptions<'_>,
) -> Result<AttentionOutput> {
    let s = tape.shape(map).to_vec();
    let tokens = map_to_tokens(tape, map)?;
    let r = attention_stack_tokens(tape, tokens, scale, params, opts)?;
    let out = tokens_to_map(tape, r.out, s[2], s[3])?;
    Ok(AttentionOutput { out, probs: r.probs })
}
