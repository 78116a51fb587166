//! Supervised objective: masked L1 on valid depth pixels plus an
//! edge-aware smoothness penalty, averaged over the output scales.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static EMPTY_DEPTH_BATCHES: AtomicUsize = AtomicUsize::new(0);

/// How many depth-loss evaluations so far had no valid pixel.
pub fn empty_depth_batches() -> usize {
    EMPTY_DEPTH_BATCHES.load(Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_smooth: f64,
    pub eps_norm: f64,
    /// Smooth the mean-normalized inverse depth instead of depth.
    pub inverse_depth: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_smooth: 0.01,
            eps_norm: 1e-7,
            inverse_depth: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_smooth >= 0.0 && self.lambda_smooth.is_finite()) {
            return Err(Error::config(format!("lambda_smooth must be >= 0, got {}", self.lambda_smooth)));
        }
        if !(self.eps_norm >= 0.0) {
            return Err(Error::config("eps_norm must be >= 0"));
        }
        Ok(())
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::dim(format!("{what}: prediction {a:?} vs target {b:?}")));
    }
    Ok(())
}

/// Mean absolute error over pixels with `gt > 0`. With no valid pixel the
/// loss is a constant zero and a warning is logged.
pub fn depth_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: &Tensor<T>) -> Result<Var> {
    same_shape(tape.shape(pred), gt.shape(), "depth loss")?;
    let mask = gt.map(|g| if g > T::zero() { T::one() } else { T::zero() });
    let n_valid = mask.data().iter().filter(|m| !m.is_zero()).count();
    if n_valid == 0 {
        EMPTY_DEPTH_BATCHES.fetch_add(1, Ordering::Relaxed);
        log::warn!("depth loss: no valid ground-truth pixel, contributing 0");
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let g = tape.constant(gt.clone());
    let m = tape.constant(mask);
    let d = tape.sub(pred, g)?;
    let a = tape.abs(d)?;
    let a = tape.mul(a, m)?;
    let s = tape.sum(a)?;
    tape.scale(s, 1.0 / n_valid as f64)
}

/// `exp(-mean_c |I(p + step) - I(p)|)` along `axis` (2 = rows, 3 = columns)
/// of `[N, C, H, W]` images, shaped `[N, H', W']`.
fn edge_weights<T: Scalar>(image: &Tensor<T>, axis: usize) -> Tensor<T> {
    let [n, c, h, w] = [image.shape()[0], image.shape()[1], image.shape()[2], image.shape()[3]];
    let (oh, ow) = if axis == 3 { (h, w - 1) } else { (h - 1, w) };
    let data = image.data();
    Tensor::from_fn(&[n, oh, ow], |i| {
        let (b, y, x) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let (y2, x2) = if axis == 3 { (y, x + 1) } else { (y + 1, x) };
        let mut acc = 0.0;
        for ch in 0..c {
            let base = (b * c + ch) * h;
            acc += (data[(base + y2) * w + x2].as_f64() - data[(base + y) * w + x].as_f64()).abs();
        }
        T::from_f64_lossy((-acc / c as f64).exp())
    })
}

/// Edge-aware smoothness of the mean-normalized prediction.
///
/// Forward differences drop the last column (row); each direction is
/// averaged over the positions where it exists and the two means are added.
pub fn smooth_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, image: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    let ps = tape.shape(pred).to_vec();
    let is = image.shape();
    if ps.len() != 3 || is.len() != 4 || is[0] != ps[0] || is[2..] != ps[1..] {
        return Err(Error::dim(format!(
            "smoothness: prediction {ps:?} and image {is:?} extents disagree"
        )));
    }
    let field = if cfg.inverse_depth {
        let one = tape.constant(Tensor::scalar(T::one()));
        tape.div(one, pred)?
    } else {
        pred
    };
    let mean = tape.mean_axes(field, &[1, 2])?;
    let denom = tape.add_scalar(mean, cfg.eps_norm)?;
    let norm = tape.div(field, denom)?;
    let mut terms = Vec::new();
    for (axis, img_axis) in [(2, 3), (1, 2)] {
        let len = ps[axis];
        if len < 2 {
            continue;
        }
        let hi = tape.slice(norm, axis, 1, len)?;
        let lo = tape.slice(norm, axis, 0, len - 1)?;
        let d = tape.sub(hi, lo)?;
        let d = tape.abs(d)?;
        let w = tape.constant(edge_weights(image, img_axis));
        let wd = tape.mul(d, w)?;
        terms.push(tape.mean(wd)?);
    }
    match terms.as_slice() {
        [] => Ok(tape.constant(Tensor::scalar(T::zero()))),
        [t] => Ok(*t),
        [a, b] => tape.add(*a, *b),
        _ => unreachable!(),
    }
}

/// Total objective and its per-term values (each averaged over scales).
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub l_depth: f64,
    pub l_smooth: f64,
    pub l_total: f64,
}

/// Mean over scales of `depth_loss + lambda * smooth_loss`; every scale map
/// is already at input resolution.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    preds: &[Var],
    gt: &Tensor<T>,
    images: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if preds.is_empty() {
        return Err(Error::dim("total loss needs at least one scale"));
    }
    let (mut ld, mut ls) = (0.0, 0.0);
    let mut acc: Option<Var> = None;
    for &p in preds {
        let d = depth_loss(tape, p, gt)?;
        let s = smooth_loss(tape, p, images, cfg)?;
        ld += tape.value(d).item()?.as_f64();
        ls += tape.value(s).item()?.as_f64();
        let ws = tape.scale(s, cfg.lambda_smooth)?;
        let t = tape.add(d, ws)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, t)?,
            None => t,
        });
    }
    let k = preds.len() as f64;
    let total = tape.scale(acc.expect("non-empty"), 1.0 / k)?;
    Ok(LossBreakdown {
        total,
        l_depth: ld / k,
        l_smooth: ls / k,
        l_total: tape.value(total).item()?.as_f64(),
    })
}
