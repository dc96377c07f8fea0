//! Window-based multi-head self-attention with interchangeable cores.

use rand::Rng;

use super::kernels::{attention, AttentionKernel};
use super::meter::BufferMeter;
use super::window::{partition, reverse, WindowLayout};
use crate::autodiff::{linear, permute, reshape, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Projection weights `W_q, W_k, W_v, W_o` (each `D x D`, applied as `x W`),
/// shared by every window.
#[derive(Debug, Clone)]
pub struct AttentionParams<T: Scalar> {
    pub dim: usize,
    pub heads: usize,
    /// Score divisor for the softmax core. The linear core ignores it.
    pub scale: f64,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn random(dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        check_heads(dim, heads)?;
        let std = (1.0 / dim as f64).sqrt();
        Ok(AttentionParams {
            dim,
            heads,
            scale: 1.0,
            wq: Tensor::randn(&[dim, dim], std, rng),
            wk: Tensor::randn(&[dim, dim], std, rng),
            wv: Tensor::randn(&[dim, dim], std, rng),
            wo: Tensor::randn(&[dim, dim], std, rng),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn vars(&self, tape: &Tape<T>) -> Projections {
        Projections {
            wq: tape.constant(self.wq.clone()),
            wk: tape.constant(self.wk.clone()),
            wv: tape.constant(self.wv.clone()),
            wo: tape.constant(self.wo.clone()),
        }
    }
}

pub(crate) fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("dim {dim} is not divisible by heads {heads}")));
    }
    Ok(())
}

/// Projection weights already on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Projections {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

fn split_heads<T: Scalar>(tape: &Tape<T>, x: Var, groups: usize, n: usize, heads: usize) -> Result<Var> {
    let d = tape.shape(x)[1] / heads;
    let x = reshape(tape, x, &[groups, n, heads, d])?;
    let x = permute(tape, x, &[0, 2, 1, 3])?;
    reshape(tape, x, &[groups * heads, n, d])
}

fn merge_heads<T: Scalar>(tape: &Tape<T>, x: Var, groups: usize, n: usize, heads: usize) -> Result<Var> {
    let d = tape.shape(x)[2];
    let x = reshape(tape, x, &[groups, heads, n, d])?;
    let x = permute(tape, x, &[0, 2, 1, 3])?;
    reshape(tape, x, &[groups * n, heads * d])
}

/// Partition `x` into `side x side` windows, run per-head attention inside
/// each window, project with `W_o`, and stitch the map back together.
pub fn windowed_attention<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    proj: &Projections,
    heads: usize,
    side: usize,
    kernel: AttentionKernel,
    meter: Option<&mut BufferMeter>,
) -> Result<Var> {
    let shape = tape.shape(x);
    let [b, c, h, w] = shape[..] else {
        return Err(Error::shape("windowed_attention", &shape, &[0, 0, 0, 0]));
    };
    let dim = tape.shape(proj.wq)[0];
    if c != dim {
        return Err(Error::Config(format!(
            "attention expects {dim} channels, input has {c}"
        )));
    }
    check_heads(dim, heads)?;
    let layout = WindowLayout::new(h, w, side)?;
    let n = layout.tokens();
    let groups = b * layout.n_windows;

    let tokens = partition(tape, x, &layout)?;
    let flat = reshape(tape, tokens, &[groups * n, c])?;
    let q = split_heads(tape, linear(tape, flat, proj.wq, None)?, groups, n, heads)?;
    let k = split_heads(tape, linear(tape, flat, proj.wk, None)?, groups, n, heads)?;
    let v = split_heads(tape, linear(tape, flat, proj.wv, None)?, groups, n, heads)?;
    let o = attention(tape, q, k, v, kernel, heads, meter)?;
    let o = merge_heads(tape, o, groups, n, heads)?;
    let o = linear(tape, o, proj.wo, None)?;
    let o = reshape(tape, o, &[groups, n, c])?;
    reverse(tape, o, &layout)
}

/// Plain forward of the windowed layer, optionally metering attention scratch.
pub fn windowed_attention_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    side: usize,
    kernel: AttentionKernel,
    meter: Option<&mut BufferMeter>,
) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let proj = params.vars(&tape);
    let out = windowed_attention(&tape, xv, &proj, params.heads, side, kernel, meter)?;
    Ok((*tape.value(out)).clone())
}

/// Window-based linear multi-head self-attention.
pub fn w_lmhsa<T: Scalar>(x: &Tensor<T>, params: &AttentionParams<T>, side: usize) -> Result<Tensor<T>> {
    windowed_attention_forward(x, params, side, AttentionKernel::Linear, None)
}

/// Window-based softmax multi-head self-attention, the quadratic baseline.
pub fn w_mhsa_baseline<T: Scalar>(x: &Tensor<T>, params: &AttentionParams<T>, side: usize) -> Result<Tensor<T>> {
    windowed_attention_forward(x, params, side, AttentionKernel::Exact { scale: params.scale }, None)
}
