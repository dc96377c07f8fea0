use std::sync::Arc;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn add<T: Scalar>(tape: &Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (av, bv) = (tape.value(a), tape.value(b));
    same_shape("add", &av, &bv)?;
    let out = av.zip_map(&bv, |x, y| x + y)?;
    Ok(tape.record(out, &[a, b], || {
        Box::new(|g, needs| {
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| g.clone()),
            ]
        })
    }))
}

pub fn scale<T: Scalar>(tape: &Tape<T>, a: Var, s: T) -> Var {
    let out = tape.value(a).scale(s);
    tape.record(out, &[a], || Box::new(move |g, _| vec![Some(g.scale(s))]))
}

pub fn sum_all<T: Scalar>(tape: &Tape<T>, a: Var) -> Var {
    let av = tape.value(a);
    let shape = av.shape().to_vec();
    let out = Tensor::scalar(av.sum());
    tape.record(out, &[a], || {
        Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    })
}

/// `sum(a * w)` for a fixed weight tensor of the same shape.
pub fn weighted_sum<T: Scalar>(tape: &Tape<T>, a: Var, w: Arc<Tensor<T>>) -> Result<Var> {
    let av = tape.value(a);
    same_shape("weighted_sum", &av, &w)?;
    let s = av
        .data()
        .iter()
        .zip(w.data())
        .map(|(&x, &y)| x * y)
        .sum();
    Ok(tape.record(Tensor::scalar(s), &[a], || {
        Box::new(move |g, _| vec![Some(w.scale(g.item()))])
    }))
}

pub fn relu6<T: Scalar>(tape: &Tape<T>, a: Var) -> Var {
    let av = tape.value(a);
    let six = T::c(6.0);
    let out = av.map(|x| x.max(T::zero()).min(six));
    tape.record(out, &[a], || {
        Box::new(move |g, _| {
            let dx = g
                .zip_map(&av, |gy, x| {
                    if x > T::zero() && x < six {
                        gy
                    } else {
                        T::zero()
                    }
                })
                .expect("relu6 grad shape");
            vec![Some(dx)]
        })
    })
}

pub fn sigmoid<T: Scalar>(tape: &Tape<T>, a: Var) -> Var {
    let out = tape.value(a).map(sigmoid_scalar);
    let saved = Arc::new(out.clone());
    tape.record(out, &[a], || {
        Box::new(move |g, _| {
            let dx = g
                .zip_map(&saved, |gy, y| gy * y * (T::one() - y))
                .expect("sigmoid grad shape");
            vec![Some(dx)]
        })
    })
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Elementwise absolute value; the subgradient at 0 is 0.
pub fn abs<T: Scalar>(tape: &Tape<T>, a: Var) -> Var {
    let av = tape.value(a);
    let out = av.map(|x| x.abs());
    tape.record(out, &[a], || {
        Box::new(move |g, _| {
            let dx = g
                .zip_map(&av, |gy, x| {
                    if x > T::zero() {
                        gy
                    } else if x < T::zero() {
                        -gy
                    } else {
                        T::zero()
                    }
                })
                .expect("abs grad shape");
            vec![Some(dx)]
        })
    })
}

/// Elementwise clamp; gradient passes only strictly inside `(lo, hi)`.
pub fn clamp<T: Scalar>(tape: &Tape<T>, a: Var, lo: T, hi: T) -> Var {
    let av = tape.value(a);
    let out = av.map(|x| x.max(lo).min(hi));
    tape.record(out, &[a], || {
        Box::new(move |g, _| {
            let dx = g
                .zip_map(&av, |gy, x| if x > lo && x < hi { gy } else { T::zero() })
                .expect("clamp grad shape");
            vec![Some(dx)]
        })
    })
}

pub fn reshape<T: Scalar>(tape: &Tape<T>, a: Var, shape: &[usize]) -> Result<Var> {
    let av = tape.value(a);
    let in_shape = av.shape().to_vec();
    let out = (*av).clone().reshape(shape)?;
    Ok(tape.record(out, &[a], || {
        Box::new(move |g, _| vec![Some(g.clone().reshape(&in_shape).expect("reshape grad"))])
    }))
}

pub fn permute<T: Scalar>(tape: &Tape<T>, a: Var, axes: &[usize]) -> Result<Var> {
    let out = tensor::permute(&tape.value(a), axes)?;
    let inv = tensor::inverse_axes(axes);
    Ok(tape.record(out, &[a], || {
        Box::new(move |g, _| vec![Some(tensor::permute(g, &inv).expect("permute grad"))])
    }))
}

fn pad_hw_forward<T: Scalar>(x: &Tensor<T>, ph: usize, pw: usize) -> Tensor<T> {
    let s = x.shape();
    let (outer, h, w) = (s[0] * s[1], s[2], s[3]);
    let (hp, wp) = (h + ph, w + pw);
    let mut out = Tensor::zeros(&[s[0], s[1], hp, wp]);
    let (src, dst) = (x.data(), out.data_mut());
    for o in 0..outer {
        for i in 0..h {
            let so = (o * h + i) * w;
            let d = (o * hp + i) * wp;
            dst[d..d + w].copy_from_slice(&src[so..so + w]);
        }
    }
    out
}

fn crop_hw_forward<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = x.shape();
    let (outer, hp, wp) = (s[0] * s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(outer * h * w);
    let src = x.data();
    for o in 0..outer {
        for i in 0..h {
            let so = (o * hp + i) * wp;
            out.extend_from_slice(&src[so..so + w]);
        }
    }
    Tensor::new(&[s[0], s[1], h, w], out).expect("crop shape")
}

fn expect_4d<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<()> {
    if x.ndim() != 4 {
        return Err(Error::shape(op, x.shape(), &[0, 0, 0, 0]));
    }
    Ok(())
}

/// Zero-pad the bottom and right edges of an NCHW tensor.
pub fn pad_hw<T: Scalar>(tape: &Tape<T>, a: Var, ph: usize, pw: usize) -> Result<Var> {
    let av = tape.value(a);
    expect_4d("pad_hw", &av)?;
    if ph == 0 && pw == 0 {
        return Ok(a);
    }
    let (h, w) = (av.dim(2), av.dim(3));
    let out = pad_hw_forward(&av, ph, pw);
    Ok(tape.record(out, &[a], || {
        Box::new(move |g, _| vec![Some(crop_hw_forward(g, h, w))])
    }))
}

/// Keep the top-left `h x w` region of an NCHW tensor.
pub fn crop_hw<T: Scalar>(tape: &Tape<T>, a: Var, h: usize, w: usize) -> Result<Var> {
    let av = tape.value(a);
    expect_4d("crop_hw", &av)?;
    let (hp, wp) = (av.dim(2), av.dim(3));
    if h > hp || w > wp {
        return Err(Error::shape("crop_hw", av.shape(), &[h, w]));
    }
    if h == hp && w == wp {
        return Ok(a);
    }
    let out = crop_hw_forward(&av, h, w);
    Ok(tape.record(out, &[a], || {
        Box::new(move |g, _| vec![Some(pad_hw_forward(g, hp - h, wp - w))])
    }))
}

/// Concatenate NCHW tensors along the channel axis.
pub fn concat_channels<T: Scalar>(tape: &Tape<T>, parts: &[Var]) -> Result<Var> {
    let vals: Vec<_> = parts.iter().map(|&p| tape.value(p)).collect();
    let first = vals
        .first()
        .ok_or_else(|| Error::Precondition("concat of zero tensors".into()))?;
    expect_4d("concat_channels", first)?;
    let (b, h, w) = (first.dim(0), first.dim(2), first.dim(3));
    for v in &vals {
        expect_4d("concat_channels", v)?;
        if v.dim(0) != b || v.dim(2) != h || v.dim(3) != w {
            return Err(Error::shape("concat_channels", first.shape(), v.shape()));
        }
    }
    let chans: Vec<usize> = vals.iter().map(|v| v.dim(1)).collect();
    let total: usize = chans.iter().sum();
    let hw = h * w;
    let mut out = Vec::with_capacity(b * total * hw);
    for n in 0..b {
        for (v, &c) in vals.iter().zip(&chans) {
            out.extend_from_slice(&v.data()[n * c * hw..(n + 1) * c * hw]);
        }
    }
    let out = Tensor::new(&[b, total, h, w], out)?;
    Ok(tape.record(out, parts, || {
        Box::new(move |g, needs| {
            let gd = g.data();
            let mut offset = 0;
            chans
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let start = offset;
                    offset += c;
                    need.then(|| {
                        let mut d = Vec::with_capacity(b * c * hw);
                        for n in 0..b {
                            let base = (n * total + start) * hw;
                            d.extend_from_slice(&gd[base..base + c * hw]);
                        }
                        Tensor::new(&[b, c, h, w], d).expect("concat grad")
                    })
                })
                .collect()
        })
    }))
}

/// Batched product of `[G, m, k]` and `[G, k, n]`; transposes are applied per batch.
pub fn bmm_forward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
) -> Result<Tensor<T>> {
    if a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) {
        return Err(Error::shape("bmm", a.shape(), b.shape()));
    }
    let g = a.dim(0);
    let (m, k) = if trans_a {
        (a.dim(2), a.dim(1))
    } else {
        (a.dim(1), a.dim(2))
    };
    let (k2, n) = if trans_b {
        (b.dim(2), b.dim(1))
    } else {
        (b.dim(1), b.dim(2))
    };
    if k != k2 {
        return Err(Error::shape("bmm", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[g, m, n]);
    let (sa, sb, sc) = (m * k, k * n, m * n);
    for (i, c) in out.data_mut().chunks_mut(sc.max(1)).enumerate().take(g) {
        T::gemm(
            trans_a,
            trans_b,
            m,
            n,
            k,
            T::one(),
            &a.data()[i * sa..(i + 1) * sa],
            &b.data()[i * sb..(i + 1) * sb],
            T::zero(),
            c,
        );
    }
    Ok(out)
}

pub fn bmm<T: Scalar>(tape: &Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (av, bv) = (tape.value(a), tape.value(b));
    let out = bmm_forward(&av, &bv, false, false)?;
    Ok(tape.record(out, &[a, b], || {
        Box::new(move |g, needs| {
            vec![
                needs[0].then(|| bmm_forward(g, &bv, false, true).expect("bmm grad a")),
                needs[1].then(|| bmm_forward(&av, g, true, false).expect("bmm grad b")),
            ]
        })
    }))
}

fn as_batch<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.clone().reshape(&s).expect("as_batch")
}

fn drop_batch<T: Scalar>(t: Tensor<T>) -> Tensor<T> {
    let s = t.shape()[1..].to_vec();
    t.reshape(&s).expect("drop_batch")
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul<T: Scalar>(tape: &Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (av, bv) = (tape.value(a), tape.value(b));
    if av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0) {
        return Err(Error::shape("matmul", av.shape(), bv.shape()));
    }
    let out = drop_batch(bmm_forward(&as_batch(&av), &as_batch(&bv), false, false)?);
    Ok(tape.record(out, &[a, b], || {
        Box::new(move |g, needs| {
            let gb = as_batch(g);
            vec![
                needs[0].then(|| {
                    drop_batch(bmm_forward(&gb, &as_batch(&bv), false, true).expect("matmul dA"))
                }),
                needs[1].then(|| {
                    drop_batch(bmm_forward(&as_batch(&av), &gb, true, false).expect("matmul dB"))
                }),
            ]
        })
    }))
}

/// Row-wise affine map `x W + b` with `x: [M, K]`, `W: [K, N]`, `b: [N]`.
pub fn linear<T: Scalar>(tape: &Tape<T>, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let (xv, wv) = (tape.value(x), tape.value(w));
    if xv.ndim() != 2 || wv.ndim() != 2 || xv.dim(1) != wv.dim(0) {
        return Err(Error::shape("linear", xv.shape(), wv.shape()));
    }
    let (m, k, n) = (xv.dim(0), xv.dim(1), wv.dim(1));
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(false, false, m, n, k, T::one(), xv.data(), wv.data(), T::zero(), out.data_mut());
    let mut parents = vec![x, w];
    if let Some(b) = bias {
        let bv = tape.value(b);
        if bv.shape() != [n] {
            return Err(Error::shape("linear bias", bv.shape(), &[n]));
        }
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o = *o + bb;
            }
        }
        parents.push(b);
    }
    let has_bias = bias.is_some();
    Ok(tape.record(out, &parents, || {
        Box::new(move |g, needs| {
            let mut grads = Vec::with_capacity(3);
            grads.push(needs[0].then(|| {
                let mut dx = Tensor::zeros(&[m, k]);
                T::gemm(false, true, m, k, n, T::one(), g.data(), wv.data(), T::zero(), dx.data_mut());
                dx
            }));
            grads.push(needs[1].then(|| {
                let mut dw = Tensor::zeros(&[k, n]);
                T::gemm(true, false, k, n, m, T::one(), xv.data(), g.data(), T::zero(), dw.data_mut());
                dw
            }));
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &r) in db.iter_mut().zip(row) {
                            *d = *d + r;
                        }
                    }
                    Tensor::new(&[n], db).expect("bias grad")
                }));
            }
            grads
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut c = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                c.set(&[i, j], s);
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let tape = Tape::<f64>::no_grad();
        let a = Tensor::from_fn(&[3, 3], |i| i as f64 * 0.5 - 1.0);
        let av = tape.constant(a.clone());
        let i = tape.constant(Tensor::eye(3));
        assert_eq!(*tape.value(matmul(&tape, av, i).unwrap()), a);

        let two = tape.constant(Tensor::from_f64(&[1, 1], &[2.0]).unwrap());
        let three = tape.constant(Tensor::from_f64(&[1, 1], &[3.0]).unwrap());
        assert_eq!(tape.value(matmul(&tape, two, three).unwrap()).data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::randn(&[7, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let tape = Tape::no_grad();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.value(matmul(&tape, av, bv).unwrap());
        assert!(c.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f64>::no_grad();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let msg = matmul(&tape, a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn relu6_points() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::from_f64(&[3], &[-1.0, 3.0, 9.0]).unwrap());
        assert_eq!(tape.value(relu6(&tape, x)).data(), &[0.0, 3.0, 6.0]);
    }

    #[test]
    fn pad_then_crop_round_trips() {
        let tape = Tape::<f64>::no_grad();
        let x = Tensor::from_fn(&[2, 3, 5, 4], |i| i as f64);
        let v = tape.constant(x.clone());
        let p = pad_hw(&tape, v, 3, 1).unwrap();
        assert_eq!(tape.shape(p), vec![2, 3, 8, 5]);
        let c = crop_hw(&tape, p, 5, 4).unwrap();
        assert_eq!(*tape.value(c), x);
    }

    #[test]
    fn concat_splits_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[1, 2, 2, 2]));
        let b = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let c = concat_channels(&tape, &[a, b]).unwrap();
        let w = Arc::new(Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64));
        let s = weighted_sum(&tape, c, w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0., 1., 2., 3., 4., 5., 6., 7.]);
        assert_eq!(g.get(b).unwrap().data(), &[8., 9., 10., 11.]);
    }
}
