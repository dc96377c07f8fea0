//! 2-d cross-correlation with zero padding, stride and channel groups.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            pad: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Conv2dSpec { stride, pad, groups }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn new<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: Conv2dSpec) -> Result<Self> {
        if x.ndim() != 4 || w.ndim() != 4 {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        let (b, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, cg, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        let g = spec.groups;
        if g == 0 || c % g != 0 || o % g != 0 {
            return Err(Error::Config(format!(
                "conv2d groups={g} must divide in_channels={c} and out_channels={o}"
            )));
        }
        if cg != c / g {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        if spec.stride == 0 || h + 2 * spec.pad < kh || wd + 2 * spec.pad < kw {
            return Err(Error::Precondition(format!(
                "conv2d output would be empty: input {:?}, kernel {:?}, {spec:?}",
                x.shape(),
                w.shape()
            )));
        }
        let ho = (h + 2 * spec.pad - kh) / spec.stride + 1;
        let wo = (wd + 2 * spec.pad - kw) / spec.stride + 1;
        Ok(Geometry {
            b,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            ho,
            wo,
            spec,
        })
    }

    fn cg(&self) -> usize {
        self.c / self.spec.groups
    }

    fn og(&self) -> usize {
        self.o / self.spec.groups
    }

    fn is_depthwise(&self) -> bool {
        self.cg() == 1 && self.og() == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.pad == 0
    }

    /// Input row/col for output position `oi` and kernel offset `ki`, if inside the image.
    #[inline]
    fn src(&self, oi: usize, ki: usize, extent: usize) -> Option<usize> {
        let p = (oi * self.spec.stride + ki) as isize - self.spec.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

fn im2col<T: Scalar>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let l = g.ho * g.wo;
    for ci in 0..g.cg() {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let d = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match g.src(oy, ky, g.h) {
                        None => d.fill(T::zero()),
                        Some(iy) => {
                            for (ox, v) in d.iter_mut().enumerate() {
                                *v = match g.src(ox, kx, g.w) {
                                    Some(ix) => plane[iy * g.w + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, cols: &[T], dx: &mut [T]) {
    let l = g.ho * g.wo;
    for ci in 0..g.cg() {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.wo {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            let p = &mut plane[iy * g.w + ix];
                            *p = *p + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Scalar>(g: &Geometry, x: &[T], w: &[T], out: &mut [T]) {
    let (hw, l, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    for n in 0..g.b {
        for ch in 0..g.c {
            let plane = &x[(n * g.c + ch) * hw..][..hw];
            let k = &w[ch * kk..][..kk];
            let dst = &mut out[(n * g.o + ch) * l..][..l];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = T::zero();
                    for ky in 0..g.kh {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for kx in 0..g.kw {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                acc = acc + k[ky * g.kw + kx] * plane[iy * g.w + ix];
                            }
                        }
                    }
                    dst[oy * g.wo + ox] = acc;
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(
    g: &Geometry,
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let (hw, l, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    let mut dx = dx;
    let mut dw = dw;
    for n in 0..g.b {
        for ch in 0..g.c {
            let plane = &x[(n * g.c + ch) * hw..][..hw];
            let k = &w[ch * kk..][..kk];
            let gy = &dy[(n * g.o + ch) * l..][..l];
            for oy in 0..g.ho {
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.wo {
                        let gv = gy[oy * g.wo + ox];
                        for kx in 0..g.kw {
                            let Some(ix) = g.src(ox, kx, g.w) else { continue };
                            let ki = ky * g.kw + kx;
                            if let Some(dx) = dx.as_deref_mut() {
                                let p = &mut dx[(n * g.c + ch) * hw + iy * g.w + ix];
                                *p = *p + k[ki] * gv;
                            }
                            if let Some(dw) = dw.as_deref_mut() {
                                let p = &mut dw[ch * kk + ki];
                                *p = *p + plane[iy * g.w + ix] * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution on plain tensors.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = Geometry::new(x, w, spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.o] {
            return Err(Error::shape("conv2d bias", b.shape(), &[g.o]));
        }
    }
    let l = g.ho * g.wo;
    let mut out = Tensor::zeros(&[g.b, g.o, g.ho, g.wo]);
    if g.is_depthwise() {
        depthwise_forward(&g, x.data(), w.data(), out.data_mut());
    } else {
        let (cg, og) = (g.cg(), g.og());
        let kdim = cg * g.kh * g.kw;
        let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { kdim * l }];
        for n in 0..g.b {
            for grp in 0..spec.groups {
                let xs = &x.data()[(n * g.c + grp * cg) * g.h * g.w..][..cg * g.h * g.w];
                let cols_ref: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(&g, xs, &mut cols);
                    &cols
                };
                let ws = &w.data()[grp * og * kdim..][..og * kdim];
                let dst = &mut out.data_mut()[(n * g.o + grp * og) * l..][..og * l];
                T::gemm(false, false, og, l, kdim, T::one(), ws, cols_ref, T::zero(), dst);
            }
        }
    }
    if let Some(b) = bias {
        for n in 0..g.b {
            for (o, &bb) in b.data().iter().enumerate() {
                for v in &mut out.data_mut()[(n * g.o + o) * l..][..l] {
                    *v = *v + bb;
                }
            }
        }
    }
    Ok(out)
}

/// Differentiable convolution. Cross-correlation convention: kernels are not flipped.
pub fn conv2d<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    spec: Conv2dSpec,
) -> Result<Var> {
    let (xv, wv) = (tape.value(x), tape.value(w));
    let bv = bias.map(|b| tape.value(b));
    let out = conv2d_forward(&xv, &wv, bv.as_deref(), spec)?;
    let g = Geometry::new(&xv, &wv, spec)?;
    let mut parents = vec![x, w];
    parents.extend(bias);
    let has_bias = bias.is_some();
    Ok(tape.record(out, &parents, || {
        Box::new(move |dy, needs| {
            let l = g.ho * g.wo;
            let mut dx = needs[0].then(|| Tensor::zeros(xv.shape()));
            let mut dw = needs[1].then(|| Tensor::zeros(wv.shape()));
            if g.is_depthwise() {
                depthwise_backward(
                    &g,
                    xv.data(),
                    wv.data(),
                    dy.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                );
            } else {
                let (cg, og) = (g.cg(), g.og());
                let kdim = cg * g.kh * g.kw;
                let mut cols = vec![T::zero(); kdim * l];
                for n in 0..g.b {
                    for grp in 0..g.spec.groups {
                        let gy = &dy.data()[(n * g.o + grp * og) * l..][..og * l];
                        let ws = &wv.data()[grp * og * kdim..][..og * kdim];
                        let xoff = (n * g.c + grp * cg) * g.h * g.w;
                        if let Some(dw) = dw.as_mut() {
                            let xs = &xv.data()[xoff..][..cg * g.h * g.w];
                            let cols_ref: &[T] = if g.is_pointwise() {
                                xs
                            } else {
                                im2col(&g, xs, &mut cols);
                                &cols
                            };
                            let dst = &mut dw.data_mut()[grp * og * kdim..][..og * kdim];
                            T::gemm(false, true, og, kdim, l, T::one(), gy, cols_ref, T::one(), dst);
                        }
                        if let Some(dx) = dx.as_mut() {
                            let dst = &mut dx.data_mut()[xoff..][..cg * g.h * g.w];
                            if g.is_pointwise() {
                                T::gemm(true, false, kdim, l, og, T::one(), ws, gy, T::one(), dst);
                            } else {
                                T::gemm(true, false, kdim, l, og, T::one(), ws, gy, T::zero(), &mut cols);
                                col2im(&g, &cols, dst);
                            }
                        }
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut db = vec![T::zero(); g.o];
                    for n in 0..g.b {
                        for (o, d) in db.iter_mut().enumerate() {
                            *d = *d + dy.data()[(n * g.o + o) * l..][..l].iter().copied().sum();
                        }
                    }
                    Tensor::new(&[g.o], db).expect("bias grad")
                }));
            }
            grads
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Direct six-nested-loop cross-correlation.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: Conv2dSpec) -> Tensor<f64> {
        let (bn, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, cg, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        let og = o / s.groups;
        let ho = (h + 2 * s.pad - kh) / s.stride + 1;
        let wo = (wd + 2 * s.pad - kw) / s.stride + 1;
        let mut out = Tensor::zeros(&[bn, o, ho, wo]);
        for n in 0..bn {
            for oc in 0..o {
                let grp = oc / og;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                        for ci in 0..cg {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                                    let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.at(&[oc, ci, ky, kx])
                                        * x.at(&[n, grp * cg + ci, iy as usize, ix as usize]);
                                }
                            }
                        }
                        out.set(&[n, oc, oy, ox], acc);
                    }
                }
            }
        }
        let _ = c;
        out
    }

    #[test]
    fn pointwise_unit_kernel_is_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 5], |i| i as f64);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d_forward(&x, &w, None, Conv2dSpec::default()).unwrap(), x);
    }

    #[test]
    fn laplacian_on_constant_image() {
        let x = Tensor::<f64>::full(&[1, 1, 5, 5], 1.0);
        let k = Tensor::from_f64(&[1, 1, 3, 3], &[-1., -1., -1., -1., 8., -1., -1., -1., -1.]).unwrap();
        let y = conv2d_forward(&x, &k, None, Conv2dSpec::new(1, 1, 1)).unwrap();
        for i in 1..4 {
            for j in 1..4 {
                assert_eq!(y.at(&[0, 0, i, j]), 0.0);
            }
        }
        // corners lose 5 neighbors to zero padding, edges lose 3
        assert_eq!(y.at(&[0, 0, 0, 0]), 5.0);
        assert_eq!(y.at(&[0, 0, 0, 2]), 3.0);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let cases = [
            ([1, 3, 6, 6], [4, 3, 3, 3], Conv2dSpec::new(1, 1, 1)),
            ([2, 3, 7, 6], [4, 3, 3, 3], Conv2dSpec::new(2, 1, 1)),
            ([1, 4, 6, 6], [4, 1, 3, 3], Conv2dSpec::new(1, 1, 4)),
            ([2, 4, 5, 5], [6, 2, 2, 2], Conv2dSpec::new(2, 0, 2)),
            ([1, 3, 4, 4], [5, 3, 1, 1], Conv2dSpec::default()),
        ];
        for (xs, ws, spec) in cases {
            let x = Tensor::randn(&xs, 1.0, &mut rng);
            let w = Tensor::randn(&ws, 1.0, &mut rng);
            let b = Tensor::randn(&[ws[0]], 1.0, &mut rng);
            let got = conv2d_forward(&x, &w, Some(&b), spec).unwrap();
            let want = naive_conv(&x, &w, Some(&b), spec);
            assert!(got.max_abs_diff(&want) < 1e-10, "{xs:?} {ws:?} {spec:?}");
        }
    }

    #[test]
    fn bad_groups_is_config_error() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 1, 3, 3]);
        let err = conv2d_forward(&x, &w, None, Conv2dSpec::new(1, 1, 2)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
