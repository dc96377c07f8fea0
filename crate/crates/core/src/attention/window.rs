//! Non-overlapping square windows over NCHW feature maps.

use crate::autodiff::{crop_hw, pad_hw, permute, reshape, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub window_side: usize,
    pub original_h: usize,
    pub original_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    pub n_windows: usize,
}

impl WindowLayout {
    pub fn new(h: usize, w: usize, window_side: usize) -> Result<Self> {
        if window_side == 0 {
            return Err(Error::Precondition("window side must be >= 1".into()));
        }
        let padded_h = h.div_ceil(window_side) * window_side;
        let padded_w = w.div_ceil(window_side) * window_side;
        Ok(WindowLayout {
            window_side,
            original_h: h,
            original_w: w,
            padded_h,
            padded_w,
            n_windows: (padded_h / window_side) * (padded_w / window_side),
        })
    }

    /// Tokens per window, `N = w^2`.
    pub fn tokens(&self) -> usize {
        self.window_side * self.window_side
    }

    pub fn window_rows(&self) -> usize {
        self.padded_h / self.window_side
    }

    pub fn window_cols(&self) -> usize {
        self.padded_w / self.window_side
    }
}

/// `[B, C, H, W] -> [B * nW, N, C]`, zero-padding bottom/right to whole windows.
/// Windows are ordered row-major; token `k` of a window is pixel `(k / w, k % w)`.
pub fn partition<T: Scalar>(tape: &Tape<T>, x: Var, layout: &WindowLayout) -> Result<Var> {
    let shape = tape.shape(x);
    let [b, c, h, w] = shape[..] else {
        return Err(Error::shape("window_partition", &shape, &[0, 0, 0, 0]));
    };
    if (h, w) != (layout.original_h, layout.original_w) {
        return Err(Error::shape("window_partition", &shape, &[layout.original_h, layout.original_w]));
    }
    let s = layout.window_side;
    let (nh, nw) = (layout.window_rows(), layout.window_cols());
    let x = pad_hw(tape, x, layout.padded_h - h, layout.padded_w - w)?;
    let x = reshape(tape, x, &[b, c, nh, s, nw, s])?;
    let x = permute(tape, x, &[0, 2, 4, 3, 5, 1])?;
    reshape(tape, x, &[b * layout.n_windows, s * s, c])
}

/// Inverse of [`partition`], cropped back to the original extent.
pub fn reverse<T: Scalar>(tape: &Tape<T>, windows: Var, layout: &WindowLayout) -> Result<Var> {
    let shape = tape.shape(windows);
    let [bn, n, c] = shape[..] else {
        return Err(Error::shape("window_reverse", &shape, &[0, 0, 0]));
    };
    if n != layout.tokens() || bn % layout.n_windows != 0 {
        return Err(Error::shape("window_reverse", &shape, &[layout.n_windows, layout.tokens()]));
    }
    let b = bn / layout.n_windows;
    let s = layout.window_side;
    let (nh, nw) = (layout.window_rows(), layout.window_cols());
    let x = reshape(tape, windows, &[b, nh, nw, s, s, c])?;
    let x = permute(tape, x, &[0, 5, 1, 3, 2, 4])?;
    let x = reshape(tape, x, &[b, c, layout.padded_h, layout.padded_w])?;
    crop_hw(tape, x, layout.original_h, layout.original_w)
}

pub fn window_partition<T: Scalar>(x: &Tensor<T>, window_side: usize) -> Result<(Tensor<T>, WindowLayout)> {
    if x.ndim() != 4 {
        return Err(Error::shape("window_partition", x.shape(), &[0, 0, 0, 0]));
    }
    let layout = WindowLayout::new(x.dim(2), x.dim(3), window_side)?;
    let tape = Tape::no_grad();
    let v = tape.constant(x.clone());
    let out = partition(&tape, v, &layout)?;
    Ok(((*tape.value(out)).clone(), layout))
}

pub fn window_reverse<T: Scalar>(windows: &Tensor<T>, layout: &WindowLayout) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let v = tape.constant(windows.clone());
    let out = reverse(&tape, v, layout)?;
    Ok((*tape.value(out)).clone())
}
