//! Attention cores on `[G, N, d]` batches of independent token sets.
//!
//! * exact: `softmax_rows(Q K^T / s) V`
//! * kernelized oracle: the `O(N^2)` double loop with `sim(q, k) = 1 + q̂·k̂`
//! * linear: the same kernel reassociated through `K̂^T V` and `Σ k̂`, which
//!   needs only a `d x d` matrix and a `d`-vector of state per head.

use super::meter::BufferMeter;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Guard for row norms inside the similarity kernel.
pub const NORM_EPS: f64 = 1e-12;
/// Floor applied to linear-attention denominators.
pub const DENOM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionKernel {
    /// Softmax attention with score scale `1/s`.
    Exact { scale: f64 },
    /// Taylor-linearized kernel attention.
    Linear,
}

impl AttentionKernel {
    pub fn name(&self) -> &'static str {
        match self {
            AttentionKernel::Exact { .. } => "exact",
            AttentionKernel::Linear => "linear",
        }
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[inline]
fn inv_norm<T: Scalar>(row: &[T]) -> T {
    T::one() / dot(row, row).sqrt().max(T::c(NORM_EPS))
}

/// `1 + (q/|q|)·(k/|k|)`, in `[0, 2]`.
pub fn taylor_similarity<T: Scalar>(q: &[T], k: &[T]) -> T {
    T::one() + dot(q, k) * inv_norm(q) * inv_norm(k)
}

/// Shape as `(G, N, d)`, accepting `[N, d]` as a single group.
fn groups<T: Scalar>(op: &'static str, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::shape(op, q.shape(), k.shape()));
    }
    match *q.shape() {
        [n, d] => Ok((1, n, d)),
        [g, n, d] => Ok((g, n, d)),
        _ => Err(Error::shape(op, q.shape(), &[0, 0, 0])),
    }
}

/// One head of exact attention. `scores` must hold `n * n` elements.
fn exact_head<T: Scalar>(q: &[T], k: &[T], v: &[T], n: usize, d: usize, scale: T, scores: &mut [T], out: &mut [T]) {
    T::gemm(false, true, n, n, d, T::one() / scale, q, k, T::zero(), scores);
    for row in scores.chunks_mut(n) {
        crate::autodiff::softmax_in_place(row);
    }
    T::gemm(false, false, n, d, n, T::one(), scores, v, T::zero(), out);
}

/// Per-head state of the linear kernel: `Σ v_j`, `K̂^T V` and `Σ k̂_j`.
fn linear_state<T: Scalar>(k: &[T], v: &[T], d: usize, vsum: &mut [T], kv: &mut [T], ksum: &mut [T]) {
    vsum.fill(T::zero());
    kv.fill(T::zero());
    ksum.fill(T::zero());
    for (kj, vj) in k.chunks(d).zip(v.chunks(d)) {
        let s = inv_norm(kj);
        for (c, &vv) in vj.iter().enumerate() {
            vsum[c] = vsum[c] + vv;
        }
        for (a, &ka) in kj.iter().enumerate() {
            let kh = ka * s;
            ksum[a] = ksum[a] + kh;
            for (x, &vv) in kv[a * d..(a + 1) * d].iter_mut().zip(vj) {
                *x = *x + kh * vv;
            }
        }
    }
}

/// Normalized query into `qhat`; returns the clamped denominator.
#[inline]
fn linear_query<T: Scalar>(qi: &[T], n: usize, ksum: &[T], qhat: &mut [T]) -> T {
    let s = inv_norm(qi);
    for (h, &x) in qhat.iter_mut().zip(qi) {
        *h = x * s;
    }
    (T::c(n as f64) + dot(qhat, ksum)).max(T::c(DENOM_EPS))
}

/// One head of linear attention. `scratch` must hold `d * d + 3 * d` elements.
fn linear_head<T: Scalar>(q: &[T], k: &[T], v: &[T], n: usize, d: usize, scratch: &mut [T], out: &mut [T]) {
    let (kv, rest) = scratch.split_at_mut(d * d);
    let (vsum, rest) = rest.split_at_mut(d);
    let (ksum, qhat) = rest.split_at_mut(d);
    let qhat = &mut qhat[..d];
    linear_state(k, v, d, vsum, kv, ksum);
    for (qi, oi) in q.chunks(d).zip(out.chunks_mut(d)) {
        let den = linear_query(qi, n, ksum, qhat);
        oi.copy_from_slice(vsum);
        for (a, &qa) in qhat.iter().enumerate() {
            for (o, &x) in oi.iter_mut().zip(&kv[a * d..(a + 1) * d]) {
                *o = *o + qa * x;
            }
        }
        for o in oi.iter_mut() {
            *o = *o / den;
        }
    }
}

/// Scratch elements one head of `kernel` needs.
pub fn scratch_len(kernel: AttentionKernel, n: usize, d: usize) -> usize {
    match kernel {
        AttentionKernel::Exact { .. } => n * n,
        AttentionKernel::Linear => d * d + 3 * d,
    }
}

/// Run `kernel` over every group. Groups are processed `heads_per_window` at a
/// time, with scratch for all of them live together; `meter` sees those
/// allocations.
pub fn attention_forward<T: Scalar>(
    kernel: AttentionKernel,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads_per_window: usize,
    mut meter: Option<&mut BufferMeter>,
) -> Result<Tensor<T>> {
    let (g, n, d) = groups("attention", q, k, v)?;
    if let AttentionKernel::Exact { scale } = kernel {
        if scale == 0.0 {
            return Err(Error::Precondition("attention scale must be non-zero".into()));
        }
    }
    let hpw = heads_per_window.max(1);
    let mut out = Tensor::zeros(q.shape());
    let per_head = scratch_len(kernel, n, d);
    let nd = n * d;
    let mut start = 0;
    while start < g {
        let end = (start + hpw).min(g);
        let mut scratch = vec![T::zero(); per_head * (end - start)];
        let bytes = scratch.len() * std::mem::size_of::<T>();
        if let Some(m) = meter.as_deref_mut() {
            m.alloc(bytes);
        }
        for (gi, buf) in (start..end).zip(scratch.chunks_mut(per_head.max(1))) {
            let (qs, ks, vs) = (&q.data()[gi * nd..][..nd], &k.data()[gi * nd..][..nd], &v.data()[gi * nd..][..nd]);
            let os = &mut out.data_mut()[gi * nd..][..nd];
            match kernel {
                AttentionKernel::Exact { scale } => exact_head(qs, ks, vs, n, d, T::c(scale), buf, os),
                AttentionKernel::Linear => linear_head(qs, ks, vs, n, d, buf, os),
            }
        }
        drop(scratch);
        if let Some(m) = meter.as_deref_mut() {
            m.free(bytes);
        }
        start = end;
    }
    Ok(out)
}

/// `Softmax_rows(Q K^T / s) V`.
pub fn attention_exact<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, scale: f64) -> Result<Tensor<T>> {
    attention_forward(AttentionKernel::Exact { scale }, q, k, v, 1, None)
}

/// Reassociated kernel attention in `O(N d^2)`.
pub fn attention_linear<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    attention_forward(AttentionKernel::Linear, q, k, v, 1, None)
}

/// Direct double loop over `sim(q_i, k_j)`; the reference for [`attention_linear`].
pub fn attention_kernelized_oracle<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (g, n, d) = groups("attention_kernelized_oracle", q, k, v)?;
    let mut out = Tensor::zeros(q.shape());
    let nd = n * d;
    for gi in 0..g {
        for i in 0..n {
            let qi = &q.data()[gi * nd + i * d..][..d];
            let mut num = vec![T::zero(); d];
            let mut den = T::zero();
            for j in 0..n {
                let kj = &k.data()[gi * nd + j * d..][..d];
                let vj = &v.data()[gi * nd + j * d..][..d];
                let s = taylor_similarity(qi, kj);
                den = den + s;
                for (a, &b) in num.iter_mut().zip(vj) {
                    *a = *a + s * b;
                }
            }
            if den < T::c(DENOM_EPS) {
                return Err(Error::Degenerate(format!(
                    "similarity mass {den} for query {i} of group {gi}: all keys antipodal"
                )));
            }
            for (o, a) in out.data_mut()[gi * nd + i * d..][..d].iter_mut().zip(num) {
                *o = a / den;
            }
        }
    }
    Ok(out)
}

fn exact_head_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    g: &[T],
    n: usize,
    d: usize,
    scale: T,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let mut p = vec![T::zero(); n * n];
    T::gemm(false, true, n, n, d, T::one() / scale, q, k, T::zero(), &mut p);
    for row in p.chunks_mut(n) {
        crate::autodiff::softmax_in_place(row);
    }
    // dV = P^T G
    T::gemm(true, false, n, d, n, T::one(), &p, g, T::zero(), dv);
    // dP = G V^T, then softmax backward in place
    let mut dp = vec![T::zero(); n * n];
    T::gemm(false, true, n, n, d, T::one(), g, v, T::zero(), &mut dp);
    for (dr, pr) in dp.chunks_mut(n).zip(p.chunks(n)) {
        let s = dot(dr, pr);
        for (x, &pv) in dr.iter_mut().zip(pr) {
            *x = pv * (*x - s);
        }
    }
    let inv = T::one() / scale;
    T::gemm(false, false, n, d, n, inv, &dp, k, T::zero(), dq);
    T::gemm(true, false, n, d, n, inv, &dp, q, T::zero(), dk);
}

#[allow(clippy::too_many_arguments)]
fn linear_head_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    g: &[T],
    n: usize,
    d: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    use crate::autodiff::l2_normalize_row_backward;
    let eps = T::c(NORM_EPS);
    let mut kv = vec![T::zero(); d * d];
    let mut vsum = vec![T::zero(); d];
    let mut ksum = vec![T::zero(); d];
    linear_state(k, v, d, &mut vsum, &mut kv, &mut ksum);

    let mut dvsum = vec![T::zero(); d];
    let mut dkv = vec![T::zero(); d * d];
    let mut dksum = vec![T::zero(); d];
    let mut qhat = vec![T::zero(); d];
    let mut num = vec![T::zero(); d];
    let mut dnum = vec![T::zero(); d];
    let mut dqhat = vec![T::zero(); d];
    for ((qi, gi), dqi) in q.chunks(d).zip(g.chunks(d)).zip(dq.chunks_mut(d)) {
        let raw_den = T::c(n as f64) + {
            let s = inv_norm(qi);
            for (h, &x) in qhat.iter_mut().zip(qi) {
                *h = x * s;
            }
            dot(&qhat, &ksum)
        };
        let clamped = raw_den < T::c(DENOM_EPS);
        let den = raw_den.max(T::c(DENOM_EPS));
        num.copy_from_slice(&vsum);
        for (a, &qa) in qhat.iter().enumerate() {
            for (o, &x) in num.iter_mut().zip(&kv[a * d..(a + 1) * d]) {
                *o = *o + qa * x;
            }
        }
        // o = num / den
        let g_dot_o = dot(gi, &num) / den;
        let dden = if clamped { T::zero() } else { -g_dot_o / den };
        for (dn, &gv) in dnum.iter_mut().zip(gi) {
            *dn = gv / den;
        }
        for a in 0..d {
            dqhat[a] = dot(&kv[a * d..(a + 1) * d], &dnum) + dden * ksum[a];
            let qa = qhat[a];
            for (x, &dn) in dkv[a * d..(a + 1) * d].iter_mut().zip(dnum.iter()) {
                *x = *x + qa * dn;
            }
            dksum[a] = dksum[a] + dden * qa;
        }
        for (s, &dn) in dvsum.iter_mut().zip(dnum.iter()) {
            *s = *s + dn;
        }
        l2_normalize_row_backward(qi, &qhat, &dqhat, eps, dqi);
    }

    let mut khat = vec![T::zero(); d];
    let mut dkhat = vec![T::zero(); d];
    for (((kj, vj), dkj), dvj) in k.chunks(d).zip(v.chunks(d)).zip(dk.chunks_mut(d)).zip(dv.chunks_mut(d)) {
        let s = inv_norm(kj);
        for (h, &x) in khat.iter_mut().zip(kj) {
            *h = x * s;
        }
        dvj.copy_from_slice(&dvsum);
        for (a, &ka) in khat.iter().enumerate() {
            let row = &dkv[a * d..(a + 1) * d];
            for (o, &x) in dvj.iter_mut().zip(row) {
                *o = *o + ka * x;
            }
            dkhat[a] = dot(row, vj) + dksum[a];
        }
        l2_normalize_row_backward(kj, &khat, &dkhat, eps, dkj);
    }
}

/// Differentiable attention core over `[G, N, d]` inputs.
pub fn attention<T: Scalar>(
    tape: &Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    kernel: AttentionKernel,
    heads_per_window: usize,
    meter: Option<&mut BufferMeter>,
) -> Result<Var> {
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    let out = attention_forward(kernel, &qv, &kv, &vv, heads_per_window, meter)?;
    let (g, n, d) = groups("attention", &qv, &kv, &vv)?;
    Ok(tape.record(out, &[q, k, v], || {
        Box::new(move |grad, _| {
            let mut dq = Tensor::zeros(qv.shape());
            let mut dk = Tensor::zeros(kv.shape());
            let mut dv = Tensor::zeros(vv.shape());
            let nd = n * d;
            for gi in 0..g {
                let r = gi * nd..(gi + 1) * nd;
                let (qs, ks, vs, gs) = (&qv.data()[r.clone()], &kv.data()[r.clone()], &vv.data()[r.clone()], &grad.data()[r.clone()]);
                let (dqs, dks, dvs) = (
                    &mut dq.data_mut()[r.clone()],
                    &mut dk.data_mut()[r.clone()],
                    &mut dv.data_mut()[r.clone()],
                );
                match kernel {
                    AttentionKernel::Exact { scale } => {
                        exact_head_backward(qs, ks, vs, gs, n, d, T::c(scale), dqs, dks, dvs)
                    }
                    AttentionKernel::Linear => linear_head_backward(qs, ks, vs, gs, n, d, dqs, dks, dvs),
                }
            }
            vec![Some(dq), Some(dk), Some(dv)]
        })
    }))
}
