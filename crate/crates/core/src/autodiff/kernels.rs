//! Forward and backward kernels on plain tensors. The tape wires these
//! together; they are also usable on their own.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel_of, strides_of, Tensor};

// ── broadcasting ─────────────────────────────────────────────────────

/// Right-aligned broadcast of two shapes (extents equal, or one of them 1).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let ea = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let eb = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (ea, eb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(format!(
                    "shapes {a:?} and {b:?} are not broadcast-compatible"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` read through the broadcast `out` shape (0 on expanded axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_index, offset_a, offset_b)` over every element of `out`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let n = numel_of(out);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Whether `small` is a plain trailing block of `big` (repeat by modulo).
fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

pub fn broadcast_binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    if out == a.shape() && (b.numel() == 1 || is_suffix(b.shape(), a.shape())) {
        let bl = b.numel();
        let bd = b.data();
        let data = a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % bl])).collect();
        return Ok(Tensor::from_parts(out, data));
    }
    if out == b.shape() && (a.numel() == 1 || is_suffix(a.shape(), b.shape())) {
        let al = a.numel();
        let ad = a.data();
        let data = b.data().iter().enumerate().map(|(i, &y)| f(ad[i % al], y)).collect();
        return Ok(Tensor::from_parts(out, data));
    }
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); numel_of(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |i, oa, ob| data[i] = f(ad[oa], bd[ob]));
    Ok(Tensor::from_parts(out, data))
}

/// Sums a broadcast-shaped gradient back down to `shape`.
pub fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = vec![T::zero(); numel_of(shape)];
    if is_suffix(shape, grad.shape()) {
        let l = out.len();
        for (i, &g) in grad.data().iter().enumerate() {
            out[i % l] += g;
        }
    } else {
        let s = broadcast_strides(shape, grad.shape());
        let zeros = vec![0; grad.rank()];
        let gd = grad.data();
        for_each_broadcast(grad.shape(), &s, &zeros, |i, o, _| out[o] += gd[i]);
    }
    Tensor::from_parts(shape.to_vec(), out)
}

// ── matmul ───────────────────────────────────────────────────────────

/// Row-major GEMM: `a` stored `m x k` (or `k x m` when `ta`), `b` stored
/// `k x n` (or `n x k` when `tb`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_rm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub batches: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dim(format!(
            "matmul needs rank >= 2 operands, got {a:?} x {b:?}"
        )));
    }
    let (ra, ca) = (a[a.len() - 2], a[a.len() - 1]);
    let (rb, cb) = (b[b.len() - 2], b[b.len() - 1]);
    let (m, ka) = if ta { (ca, ra) } else { (ra, ca) };
    let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
    if ka != kb {
        return Err(Error::dim(format!(
            "matmul inner extents disagree: {a:?} x {b:?} (transpose a: {ta}, b: {tb})"
        )));
    }
    let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let (batch, a_batched, b_batched) = if ba == bb {
        (ba.to_vec(), !ba.is_empty(), !bb.is_empty())
    } else if bb.is_empty() {
        (ba.to_vec(), true, false)
    } else if ba.is_empty() {
        (bb.to_vec(), false, true)
    } else {
        return Err(Error::dim(format!(
            "matmul batch extents not broadcast-compatible: {a:?} x {b:?}"
        )));
    };
    let mut out_shape = batch.clone();
    out_shape.push(m);
    out_shape.push(n);
    let mut plan = MatmulPlan {
        out_shape,
        batches: numel_of(&batch),
        a_batched,
        b_batched,
        m,
        k: ka,
        n,
    };
    // A batched, untransposed lhs against a shared rhs is one tall GEMM.
    if a_batched && !b_batched && !ta {
        plan.m *= plan.batches;
        plan.batches = 1;
        plan.a_batched = false;
    }
    Ok(plan)
}

pub fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool, alpha: T) -> Result<Tensor<T>> {
    let p = matmul_plan(a.shape(), b.shape(), ta, tb)?;
    let (sa, sb, sc) = (p.m * p.k, p.k * p.n, p.m * p.n);
    let mut out = vec![T::zero(); numel_of(&p.out_shape)];
    for bi in 0..p.batches {
        let ao = if p.a_batched { bi * sa } else { 0 };
        let bo = if p.b_batched { bi * sb } else { 0 };
        gemm_rm(
            p.m,
            p.k,
            p.n,
            alpha,
            &a.data()[ao..ao + sa],
            ta,
            &b.data()[bo..bo + sb],
            tb,
            T::zero(),
            &mut out[bi * sc..(bi + 1) * sc],
        );
    }
    Ok(Tensor::from_parts(p.out_shape, out))
}

/// Gradients of `alpha * op(a) * op(b)` given the output gradient.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
    alpha: T,
    grad: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let p = matmul_plan(a.shape(), b.shape(), ta, tb).expect("validated in forward");
    let (m, k, n) = (p.m, p.k, p.n);
    let (sa, sb, sc) = (m * k, k * n, m * n);
    let g = grad.data();
    let mut da = need_a.then(|| vec![T::zero(); a.numel()]);
    let mut db = need_b.then(|| vec![T::zero(); b.numel()]);
    for bi in 0..p.batches {
        let ao = if p.a_batched { bi * sa } else { 0 };
        let bo = if p.b_batched { bi * sb } else { 0 };
        let gs = &g[bi * sc..(bi + 1) * sc];
        let asl = &a.data()[ao..ao + sa];
        let bsl = &b.data()[bo..bo + sb];
        if let Some(da) = da.as_mut() {
            let beta = if p.a_batched || bi == 0 { T::zero() } else { T::one() };
            let dst = &mut da[ao..ao + sa];
            if !ta {
                gemm_rm(m, n, k, alpha, gs, false, bsl, !tb, beta, dst);
            } else {
                gemm_rm(k, n, m, alpha, bsl, tb, gs, true, beta, dst);
            }
        }
        if let Some(db) = db.as_mut() {
            let beta = if p.b_batched || bi == 0 { T::zero() } else { T::one() };
            let dst = &mut db[bo..bo + sb];
            if !tb {
                gemm_rm(k, m, n, alpha, asl, !ta, gs, false, beta, dst);
            } else {
                gemm_rm(n, m, k, alpha, gs, true, asl, ta, beta, dst);
            }
        }
    }
    (
        da.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
        db.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
    )
}

// ── softmax ──────────────────────────────────────────────────────────

pub fn softmax_lastdim_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let max = lane_max(row);
        for v in row.iter_mut() {
            *v = (*v - max).exp_nonpositive();
        }
        let inv = T::one() / lane_sum(row);
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

#[inline(always)]
fn lane_max<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::neg_infinity(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a = if v > *a { v } else { *a };
        }
    }
    let mut m = acc.iter().copied().fold(T::neg_infinity(), T::max);
    for &v in tail {
        m = m.max(v);
    }
    m
}

/// Sum with eight independent accumulators so the loop vectorizes.
#[inline(always)]
fn lane_sum<T: Scalar>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for ch in chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a += v;
        }
    }
    let mut s = acc.iter().copied().sum::<T>();
    for &v in tail {
        s += v;
    }
    s
}

#[inline(always)]
fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = acc.iter().copied().sum::<T>();
    for (&x, &y) in ta.iter().zip(tb) {
        s += x * y;
    }
    s
}

pub fn softmax_lastdim_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let c = *y.shape().last().unwrap();
    let mut out = vec![T::zero(); y.numel()];
    for ((o, yr), gr) in out
        .chunks_exact_mut(c)
        .zip(y.data().chunks_exact(c))
        .zip(grad.data().chunks_exact(c))
    {
        let dot = lane_dot(yr, gr);
        for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

// ── fused scaled dot-product attention ───────────────────────────────

const ATTN_ROWS: usize = 32;

/// Per query row: the score maximum and the exponential sum, enough to
/// rebuild the probability row exactly during backward.
#[derive(Clone, Debug)]
pub struct AttentionStats<T> {
    pub max: Vec<T>,
    pub sum: Vec<T>,
}

pub(crate) struct AttnGeom {
    pub b: usize,
    pub tq: usize,
    pub tk: usize,
    pub d: usize,
    pub dv: usize,
}

pub(crate) fn attention_geom(q: &[usize], k: &[usize], v: &[usize]) -> Result<AttnGeom> {
    match (q, k, v) {
        ([b, tq, d], [bk, tk, dk], [bv, tv, dv]) if b == bk && b == bv && d == dk && tk == tv => Ok(AttnGeom {
            b: *b,
            tq: *tq,
            tk: *tk,
            d: *d,
            dv: *dv,
        }),
        _ => Err(Error::dim(format!(
            "attention expects q [B,Tq,d], k [B,Tk,d], v [B,Tk,dv]; got {q:?}, {k:?}, {v:?}"
        ))),
    }
}

/// Probability rows `r0..r0+rows` of batch `bi` into `p` (`rows x tk`).
#[inline(always)]
fn attention_probs_block<T: Scalar>(
    g: &AttnGeom,
    q: &[T],
    k: &[T],
    alpha: T,
    bi: usize,
    r0: usize,
    rows: usize,
    p: &mut [T],
    stats: Option<(&[T], &[T])>,
    out_stats: Option<(&mut [T], &mut [T])>,
) {
    let qb = &q[(bi * g.tq + r0) * g.d..];
    let kb = &k[bi * g.tk * g.d..];
    gemm_rm(rows, g.d, g.tk, alpha, qb, false, kb, true, T::zero(), p);
    let mut out_stats = out_stats;
    for (i, row) in p.chunks_exact_mut(g.tk).take(rows).enumerate() {
        let gi = bi * g.tq + r0 + i;
        let (max, sum) = match stats {
            Some((m, s)) => {
                for v in row.iter_mut() {
                    *v = (*v - m[gi]).exp_nonpositive();
                }
                (m[gi], s[gi])
            }
            None => {
                let max = lane_max(row);
                for v in row.iter_mut() {
                    *v = (*v - max).exp_nonpositive();
                }
                (max, lane_sum(row))
            }
        };
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
        if let Some((m, s)) = out_stats.as_mut() {
            m[gi] = max;
            s[gi] = sum;
        }
    }
}

/// `softmax(alpha * q kᵀ) v` per batch, without materializing the full
/// score matrix. Returns the output, the row statistics and, on request,
/// the `[B, Tq, Tk]` probabilities.
#[inline(always)]
fn attention_forward_impl<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    alpha: T,
    capture: bool,
) -> Result<(Tensor<T>, AttentionStats<T>, Option<Tensor<T>>)> {
    let g = attention_geom(q.shape(), k.shape(), v.shape())?;
    let mut out = vec![T::zero(); g.b * g.tq * g.dv];
    let mut max = vec![T::zero(); g.b * g.tq];
    let mut sum = vec![T::zero(); g.b * g.tq];
    let mut probs = capture.then(|| vec![T::zero(); g.b * g.tq * g.tk]);
    let mut p = vec![T::zero(); ATTN_ROWS * g.tk];
    for bi in 0..g.b {
        for r0 in (0..g.tq).step_by(ATTN_ROWS) {
            let rows = ATTN_ROWS.min(g.tq - r0);
            attention_probs_block(&g, q.data(), k.data(), alpha, bi, r0, rows, &mut p, None, Some((&mut max, &mut sum)));
            let vb = &v.data()[bi * g.tk * g.dv..];
            let ob = &mut out[(bi * g.tq + r0) * g.dv..];
            gemm_rm(rows, g.tk, g.dv, T::one(), &p, false, vb, false, T::zero(), ob);
            if let Some(all) = probs.as_mut() {
                let off = (bi * g.tq + r0) * g.tk;
                all[off..off + rows * g.tk].copy_from_slice(&p[..rows * g.tk]);
            }
        }
    }
    let probs = probs.map(|d| Tensor::from_parts(vec![g.b, g.tq, g.tk], d));
    Ok((Tensor::from_parts(vec![g.b, g.tq, g.dv], out), AttentionStats { max, sum }, probs))
}

/// Gradients of the fused attention with respect to `q`, `k` and `v`,
/// rebuilding each probability block from the stored statistics.
#[inline(always)]
fn attention_backward_impl<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    out: &Tensor<T>,
    stats: &AttentionStats<T>,
    alpha: T,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let g = attention_geom(q.shape(), k.shape(), v.shape()).expect("validated in forward");
    let mut dq = vec![T::zero(); q.numel()];
    let mut dk = vec![T::zero(); k.numel()];
    let mut dv = vec![T::zero(); v.numel()];
    let mut p = vec![T::zero(); ATTN_ROWS * g.tk];
    let mut dp = vec![T::zero(); ATTN_ROWS * g.tk];
    // Row-wise <dO, O> equals the row-wise <dP, P> term of the softmax rule.
    let delta: Vec<T> = grad
        .data()
        .chunks_exact(g.dv)
        .zip(out.data().chunks_exact(g.dv))
        .map(|(a, b)| lane_dot(a, b))
        .collect();
    for bi in 0..g.b {
        let kb = &k.data()[bi * g.tk * g.d..(bi + 1) * g.tk * g.d];
        let vb = &v.data()[bi * g.tk * g.dv..(bi + 1) * g.tk * g.dv];
        for r0 in (0..g.tq).step_by(ATTN_ROWS) {
            let rows = ATTN_ROWS.min(g.tq - r0);
            attention_probs_block(
                &g,
                q.data(),
                k.data(),
                alpha,
                bi,
                r0,
                rows,
                &mut p,
                Some((&stats.max, &stats.sum)),
                None,
            );
            let go = &grad.data()[(bi * g.tq + r0) * g.dv..];
            let dvb = &mut dv[bi * g.tk * g.dv..(bi + 1) * g.tk * g.dv];
            gemm_rm(g.tk, rows, g.dv, T::one(), &p, true, go, false, T::one(), dvb);
            gemm_rm(rows, g.dv, g.tk, T::one(), go, false, vb, true, T::zero(), &mut dp);
            for i in 0..rows {
                let dl = delta[bi * g.tq + r0 + i];
                let pr = &p[i * g.tk..(i + 1) * g.tk];
                for (d, &pv) in dp[i * g.tk..(i + 1) * g.tk].iter_mut().zip(pr) {
                    *d = pv * (*d - dl);
                }
            }
            let dqb = &mut dq[(bi * g.tq + r0) * g.d..];
            gemm_rm(rows, g.tk, g.d, alpha, &dp, false, kb, false, T::zero(), dqb);
            let qb = &q.data()[(bi * g.tq + r0) * g.d..];
            let dkb = &mut dk[bi * g.tk * g.d..(bi + 1) * g.tk * g.d];
            gemm_rm(g.tk, rows, g.d, alpha, &dp, true, qb, false, T::one(), dkb);
        }
    }
    (
        Tensor::from_parts(q.shape().to_vec(), dq),
        Tensor::from_parts(k.shape().to_vec(), dk),
        Tensor::from_parts(v.shape().to_vec(), dv),
    )
}

pub fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    alpha: T,
    capture: bool,
) -> Result<(Tensor<T>, AttentionStats<T>, Option<Tensor<T>>)> {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { simd::attention_forward(q, k, v, alpha, capture) };
    }
    attention_forward_impl(q, k, v, alpha, capture)
}

pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    out: &Tensor<T>,
    stats: &AttentionStats<T>,
    alpha: T,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: as above.
        return unsafe { simd::attention_backward(q, k, v, out, stats, alpha, grad) };
    }
    attention_backward_impl(q, k, v, out, stats, alpha, grad)
}

/// The same kernels compiled for wider vectors. Only lane width changes;
/// the arithmetic and its order are identical, so results match bitwise.
#[cfg(target_arch = "x86_64")]
mod simd {
    use super::*;

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn attention_forward<T: Scalar>(
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        alpha: T,
        capture: bool,
    ) -> Result<(Tensor<T>, AttentionStats<T>, Option<Tensor<T>>)> {
        attention_forward_impl(q, k, v, alpha, capture)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn attention_backward<T: Scalar>(
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        out: &Tensor<T>,
        stats: &AttentionStats<T>,
        alpha: T,
        grad: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        attention_backward_impl(q, k, v, out, stats, alpha, grad)
    }
}

// ── conv2d ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv_geom(x: &[usize], w: &[usize], stride: usize) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::dim(format!(
            "conv2d expects x [N,Cin,H,W] and w [Cout,Cin,k,k], got {x:?} and {w:?}"
        )));
    }
    if x[1] != w[1] {
        return Err(Error::dim(format!(
            "conv2d channel mismatch: input {x:?} has {} channels, kernel {w:?} expects {}",
            x[1], w[1]
        )));
    }
    let k = w[2];
    if w[3] != k || k % 2 == 0 {
        return Err(Error::dim(format!("conv2d kernel must be square and odd, got {w:?}")));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::dim(format!("conv2d stride must be 1 or 2, got {stride}")));
    }
    let pad = (k - 1) / 2;
    let ho = (x[2] + 2 * pad - k) / stride + 1;
    let wo = (x[3] + 2 * pad - k) / stride + 1;
    Ok(ConvGeom {
        n: x[0],
        ci: x[1],
        h: x[2],
        w: x[3],
        co: w[0],
        k,
        stride,
        pad,
        ho,
        wo,
    })
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn col_rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn col_len(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let l = g.col_len();
    for c in 0..g.ci {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let l = g.col_len();
    for c in 0..g.ci {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded 2-D convolution (cross-correlation) with optional bias.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize) -> Result<Tensor<T>> {
    let g = conv_geom(x.shape(), w.shape(), stride)?;
    if let Some(b) = bias {
        if b.numel() != g.co {
            return Err(Error::dim(format!(
                "conv2d bias has {} values for {} output channels",
                b.numel(),
                g.co
            )));
        }
    }
    let (l, rows) = (g.col_len(), g.col_rows());
    let in_sz = g.ci * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.co * l];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * l] };
    for ni in 0..g.n {
        let xs = &x.data()[ni * in_sz..(ni + 1) * in_sz];
        let os = &mut out[ni * g.co * l..(ni + 1) * g.co * l];
        if let Some(b) = bias {
            for (c, chunk) in os.chunks_exact_mut(l).enumerate() {
                chunk.fill(b.data()[c]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(&g, xs, &mut cols);
            &cols
        };
        gemm_rm(g.co, rows, l, T::one(), w.data(), false, src, false, beta, os);
    }
    Ok(Tensor::from_parts(vec![g.n, g.co, g.ho, g.wo], out))
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    grad: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let g = conv_geom(x.shape(), w.shape(), stride).expect("validated in forward");
    let (l, rows) = (g.col_len(), g.col_rows());
    let in_sz = g.ci * g.h * g.w;
    let mut dx = need[0].then(|| vec![T::zero(); x.numel()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.numel()]);
    let mut db = need[2].then(|| vec![T::zero(); g.co]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * l }];
    let mut dcols = vec![T::zero(); if g.is_pointwise() || !need[0] { 0 } else { rows * l }];
    for ni in 0..g.n {
        let gs = &grad.data()[ni * g.co * l..(ni + 1) * g.co * l];
        let xs = &x.data()[ni * in_sz..(ni + 1) * in_sz];
        if let Some(db) = db.as_mut() {
            for (c, chunk) in gs.chunks_exact(l).enumerate() {
                db[c] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(&g, xs, &mut cols);
                &cols
            };
            gemm_rm(g.co, l, rows, T::one(), gs, false, src, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[ni * in_sz..(ni + 1) * in_sz];
            if g.is_pointwise() {
                gemm_rm(rows, g.co, l, T::one(), w.data(), true, gs, false, T::zero(), dxs);
            } else {
                gemm_rm(rows, g.co, l, T::one(), w.data(), true, gs, false, T::zero(), &mut dcols);
                col2im(&g, &dcols, dxs);
            }
        }
    }
    ConvGrads {
        dx: dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        dw: dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        db: db.map(|d| Tensor::from_parts(vec![g.co], d)),
    }
}

// ── bilinear upsampling (align_corners = false) ──────────────────────

/// Source taps `(i0, i1, weight_of_i1)` for every destination coordinate.
fn linear_taps<T: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, T::from_f64_lossy(src - i0 as f64))
        })
        .collect()
}

fn upsample_check(shape: &[usize], oh: usize, ow: usize) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::dim(format!("upsample expects [N,C,H,W], got {shape:?}")));
    }
    if oh == 0 || ow == 0 {
        return Err(Error::dim(format!("upsample target extent is zero ({oh}x{ow})")));
    }
    if oh < shape[2] || ow < shape[3] {
        return Err(Error::dim(format!(
            "upsample target {oh}x{ow} smaller than input {}x{}",
            shape[2], shape[3]
        )));
    }
    Ok(())
}

pub fn upsample_bilinear_forward<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    upsample_check(x.shape(), oh, ow)?;
    let (planes, h, w) = (x.shape()[0] * x.shape()[1], x.shape()[2], x.shape()[3]);
    let ty = linear_taps::<T>(h, oh);
    let tx = linear_taps::<T>(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = r0[x0] + (r0[x1] - r0[x0]) * lx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * lx;
                dst[oy * ow + ox] = top + (bot - top) * ly;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[2] = oh;
    shape[3] = ow;
    Ok(Tensor::from_parts(shape, out))
}

pub fn upsample_bilinear_backward<T: Scalar>(in_shape: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let (planes, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (grad.shape()[2], grad.shape()[3]);
    let ty = linear_taps::<T>(h, oh);
    let tx = linear_taps::<T>(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let gs = &grad.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let gv = gs[oy * ow + ox];
                let (wy0, wx0) = (T::one() - ly, T::one() - lx);
                dst[y0 * w + x0] += gv * wy0 * wx0;
                dst[y0 * w + x1] += gv * wy0 * lx;
                dst[y1 * w + x0] += gv * ly * wx0;
                dst[y1 * w + x1] += gv * ly * lx;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

// ── layout ops ───────────────────────────────────────────────────────

pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::dim(format!(
            "invalid permutation {perm:?} for shape {:?}",
            x.shape()
        )));
    }
    let in_strides = x.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; rank];
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for_each_broadcast(&out_shape, &src_strides, &zeros, |i, o, _| out[i] = xd[o]);
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::dim(format!("concat axis {axis} out of range for rank {rank}")));
    }
    for p in parts {
        let ok = p.rank() == rank
            && (0..rank).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
        if !ok {
            return Err(Error::dim(format!(
                "concat shape mismatch {:?} vs {:?} on axis {axis}",
                first.shape(),
                p.shape()
            )));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let blk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * blk..(o + 1) * blk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

pub fn slice_axis<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || start >= end || end > x.shape()[axis] {
        return Err(Error::dim(format!(
            "slice [{start}, {end}) on axis {axis} invalid for shape {:?}",
            x.shape()
        )));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let ext = x.shape()[axis];
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * ext * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoint of `slice_axis`: scatters `grad` into a zero tensor of `shape`.
pub fn slice_axis_backward<T: Scalar>(shape: &[usize], axis: usize, start: usize, grad: &Tensor<T>) -> Tensor<T> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let ext = shape[axis];
    let len = grad.shape()[axis];
    let mut out = vec![T::zero(); numel_of(shape)];
    for o in 0..outer {
        let dst = o * ext * inner + start * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&grad.data()[src..src + len * inner]);
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Sums over `axes`, keeping them as extent-1 axes.
pub fn sum_axes<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    if let Some(&a) = axes.iter().find(|&&a| a >= x.rank()) {
        return Err(Error::dim(format!("reduction axis {a} out of range for {:?}", x.shape())));
    }
    let mut shape = x.shape().to_vec();
    for &a in axes {
        shape[a] = 1;
    }
    Ok(reduce_to_shape(x, &shape))
}

/// Adjoint of `sum_axes`: broadcasts `grad` back to `shape`.
pub fn expand_to<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let zeros = Tensor::zeros(shape);
    broadcast_binary(&zeros, grad, |_, g| g).expect("reduced shape broadcasts back")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn general_broadcast_and_reduce() {
        let a = t(&[2, 1, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[2, 1], &[10., 20.]);
        let c = broadcast_binary(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 2, 3]);
        assert_eq!(c.data(), &[11., 12., 13., 21., 22., 23., 14., 15., 16., 24., 25., 26.]);
        let ra = reduce_to_shape(&c, &[2, 1, 3]);
        assert_eq!(ra.data(), &[32., 34., 36., 38., 40., 42.]);
        let rb = reduce_to_shape(&c, &[2, 1]);
        assert_eq!(rb.data(), &[81., 141.]);
    }

    #[test]
    fn permute_roundtrip() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]).unwrap(), x.get(&[1, 2, 3]).unwrap());
        let back = permute(&p, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_and_slice_are_adjoint_layouts() {
        let a = Tensor::<f64>::from_fn(&[2, 1, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 2, 3], |i| 100.0 + i as f64);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(slice_axis(&c, 1, 0, 1).unwrap(), a);
        assert_eq!(slice_axis(&c, 1, 1, 3).unwrap(), b);
        let g = slice_axis_backward(&[2, 3, 3], 1, 1, &b);
        assert_eq!(g.get(&[1, 2, 2]).unwrap(), b.get(&[1, 1, 2]).unwrap());
        assert_eq!(g.get(&[1, 0, 2]).unwrap(), 0.0);
    }

    #[test]
    fn matmul_transposes_agree() {
        let a = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::<f64>::from_fn(&[4, 2], |i| (i as f64 * 0.91).cos());
        let ab = matmul_forward(&a, &b, false, false, 1.0).unwrap();
        let at = permute(&a, &[1, 0]).unwrap();
        let bt = permute(&b, &[1, 0]).unwrap();
        let ab2 = matmul_forward(&at, &bt, true, true, 1.0).unwrap();
        assert!(ab.max_abs_diff(&ab2).unwrap() < 1e-12);
        assert!(matmul_forward(&a, &a, false, false, 1.0).is_err());
    }
}
