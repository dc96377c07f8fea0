use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn last_dim<T: Scalar>(x: &Tensor<T>) -> usize {
    x.shape().last().copied().unwrap_or(1)
}

/// Row-wise softmax over the last axis, with max subtraction.
pub fn softmax_rows_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let m = last_dim(x);
    let mut out = x.clone();
    if m == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(m) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub fn softmax_rows<T: Scalar>(tape: &Tape<T>, x: Var) -> Var {
    let out = softmax_rows_forward(&tape.value(x));
    let m = last_dim(&out);
    let y = std::sync::Arc::new(out.clone());
    tape.record(out, &[x], || {
        Box::new(move |g, _| {
            let mut dx = Tensor::zeros(g.shape());
            for ((dr, gr), yr) in dx
                .data_mut()
                .chunks_mut(m)
                .zip(g.data().chunks(m))
                .zip(y.data().chunks(m))
            {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(dx)]
        })
    })
}

/// Divide each last-axis row by `max(||row||_2, eps)`.
pub fn l2_normalize_rows_forward<T: Scalar>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let m = last_dim(x);
    let mut out = x.clone();
    if m == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(m) {
        let n = row_norm(row).max(eps);
        for v in row.iter_mut() {
            *v = *v / n;
        }
    }
    out
}

#[inline]
pub(crate) fn row_norm<T: Scalar>(row: &[T]) -> T {
    row.iter().map(|&v| v * v).sum::<T>().sqrt()
}

pub fn l2_normalize_rows<T: Scalar>(tape: &Tape<T>, x: Var, eps: T) -> Var {
    let xv = tape.value(x);
    let out = l2_normalize_rows_forward(&xv, eps);
    let m = last_dim(&out);
    let y = std::sync::Arc::new(out.clone());
    tape.record(out, &[x], || {
        Box::new(move |g, _| {
            let mut dx = Tensor::zeros(g.shape());
            for (((dr, gr), yr), xr) in dx
                .data_mut()
                .chunks_mut(m)
                .zip(g.data().chunks(m))
                .zip(y.data().chunks(m))
                .zip(xv.data().chunks(m))
            {
                l2_normalize_row_backward(xr, yr, gr, eps, dr);
            }
            vec![Some(dx)]
        })
    })
}

/// Cotangent of `y = x / max(|x|, eps)` for one row.
#[inline]
pub(crate) fn l2_normalize_row_backward<T: Scalar>(x: &[T], y: &[T], g: &[T], eps: T, dx: &mut [T]) {
    let n = row_norm(x);
    if n > eps {
        let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for ((d, &gv), &yv) in dx.iter_mut().zip(g).zip(y) {
            *d = (gv - yv * dot) / n;
        }
    } else {
        for (d, &gv) in dx.iter_mut().zip(g) {
            *d = gv / eps;
        }
    }
}

/// Per-channel batch statistics from a training-mode forward pass.
/// `var` is the unbiased estimate used for running averages.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per channel, `B * H * W`.
    pub count: usize,
}

pub enum BnMode<'a, T> {
    Train,
    Eval {
        running_mean: &'a Tensor<T>,
        running_var: &'a Tensor<T>,
    },
}

/// Eval-mode normalization on plain tensors.
pub fn batchnorm2d_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (c, hw) = check_bn(x, gamma, beta)?;
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(hw.max(1)).enumerate() {
        let ch = i % c;
        let inv = T::one() / (running_var.data()[ch] + eps).sqrt();
        let (g, b, m) = (gamma.data()[ch], beta.data()[ch], running_mean.data()[ch]);
        for v in chunk {
            *v = (*v - m) * inv * g + b;
        }
    }
    Ok(out)
}

fn check_bn<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize)> {
    if x.ndim() != 4 {
        return Err(Error::shape("batchnorm2d", x.shape(), &[0, 0, 0, 0]));
    }
    let c = x.dim(1);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batchnorm2d affine", gamma.shape(), &[c]));
    }
    Ok((c, x.dim(2) * x.dim(3)))
}

pub fn batchnorm2d<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    mode: BnMode<'_, T>,
    eps: T,
) -> Result<(Var, Option<BatchStats<T>>)> {
    let (xv, gv, bv) = (tape.value(x), tape.value(gamma), tape.value(beta));
    let (c, hw) = check_bn(&xv, &gv, &bv)?;
    let b = xv.dim(0);
    let count = b * hw;
    if count == 0 {
        return Err(Error::Precondition("batchnorm2d over an empty batch".into()));
    }
    match mode {
        BnMode::Eval {
            running_mean,
            running_var,
        } => {
            let out = batchnorm2d_eval_forward(&xv, &gv, &bv, running_mean, running_var, eps)?;
            let inv_std: Vec<T> = running_var
                .data()
                .iter()
                .map(|&v| T::one() / (v + eps).sqrt())
                .collect();
            let mean = running_mean.data().to_vec();
            Ok((
                tape.record(out, &[x, gamma, beta], || {
                    Box::new(move |g, needs| {
                        let mut dx = needs[0].then(|| Tensor::zeros(g.shape()));
                        let mut dgamma = vec![T::zero(); c];
                        let mut dbeta = vec![T::zero(); c];
                        for (i, gc) in g.data().chunks(hw).enumerate() {
                            let ch = i % c;
                            let xc = &xv.data()[i * hw..][..hw];
                            for (&gy, &xx) in gc.iter().zip(xc) {
                                dgamma[ch] = dgamma[ch] + gy * (xx - mean[ch]) * inv_std[ch];
                                dbeta[ch] = dbeta[ch] + gy;
                            }
                            if let Some(dx) = dx.as_mut() {
                                let s = gv.data()[ch] * inv_std[ch];
                                for (d, &gy) in dx.data_mut()[i * hw..][..hw].iter_mut().zip(gc) {
                                    *d = gy * s;
                                }
                            }
                        }
                        vec![
                            dx,
                            needs[1].then(|| Tensor::new(&[c], dgamma).unwrap()),
                            needs[2].then(|| Tensor::new(&[c], dbeta).unwrap()),
                        ]
                    })
                }),
                None,
            ))
        }
        BnMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let cnt = T::c(count as f64);
            for (i, chunk) in xv.data().chunks(hw).enumerate() {
                let s: T = chunk.iter().copied().sum();
                mean[i % c] = mean[i % c] + s;
            }
            for m in mean.iter_mut() {
                *m = *m / cnt;
            }
            for (i, chunk) in xv.data().chunks(hw).enumerate() {
                let m = mean[i % c];
                let s: T = chunk.iter().map(|&v| (v - m) * (v - m)).sum();
                var[i % c] = var[i % c] + s;
            }
            let biased: Vec<T> = var.iter().map(|&v| v / cnt).collect();
            let unbiased: Vec<T> = if count > 1 {
                var.iter().map(|&v| v / T::c((count - 1) as f64)).collect()
            } else {
                biased.clone()
            };
            let inv_std: Vec<T> = biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut xhat = (*xv).clone();
            for (i, chunk) in xhat.data_mut().chunks_mut(hw).enumerate() {
                let ch = i % c;
                for v in chunk {
                    *v = (*v - mean[ch]) * inv_std[ch];
                }
            }
            let mut out = xhat.clone();
            for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
                let ch = i % c;
                let (g, bb) = (gv.data()[ch], bv.data()[ch]);
                for v in chunk {
                    *v = *v * g + bb;
                }
            }
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
                count,
            };
            let var_ = tape.record(out, &[x, gamma, beta], || {
                Box::new(move |g, needs| {
                    // dxhat = g * gamma; dx = inv_std/M * (M dxhat - sum(dxhat) - xhat sum(dxhat xhat))
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gx = vec![T::zero(); c];
                    for (i, (gc, xc)) in g.data().chunks(hw).zip(xhat.data().chunks(hw)).enumerate() {
                        let ch = i % c;
                        for (&gy, &xh) in gc.iter().zip(xc) {
                            sum_g[ch] = sum_g[ch] + gy;
                            sum_gx[ch] = sum_gx[ch] + gy * xh;
                        }
                    }
                    let dx = needs[0].then(|| {
                        let mut dx = Tensor::zeros(g.shape());
                        for (i, ((dc, gc), xc)) in dx
                            .data_mut()
                            .chunks_mut(hw)
                            .zip(g.data().chunks(hw))
                            .zip(xhat.data().chunks(hw))
                            .enumerate()
                        {
                            let ch = i % c;
                            let k = gv.data()[ch] * inv_std[ch] / cnt;
                            for ((d, &gy), &xh) in dc.iter_mut().zip(gc).zip(xc) {
                                *d = k * (cnt * gy - sum_g[ch] - xh * sum_gx[ch]);
                            }
                        }
                        dx
                    });
                    vec![
                        dx,
                        needs[1].then(|| Tensor::new(&[c], sum_gx.clone()).unwrap()),
                        needs[2].then(|| Tensor::new(&[c], sum_g.clone()).unwrap()),
                    ]
                })
            });
            Ok((var_, Some(stats)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::<f64>::from_f64(&[2, 4], &[1., 1., 1., 1., 0., 2f64.ln(), 0., 0.]).unwrap();
        let y = softmax_rows_forward(&x);
        for v in &y.data()[..4] {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = Tensor::<f64>::from_f64(&[1, 2], &[0.0, 2f64.ln()]).unwrap();
        let y = softmax_rows_forward(&x);
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_naive_two_pass() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[5, 8], 3.0, &mut rng);
        let y = softmax_rows_forward(&x);
        for r in 0..5 {
            let denom: f64 = (0..8).map(|j| x.at(&[r, j]).exp()).sum();
            let mut total = 0.0;
            for j in 0..8 {
                assert!((y.at(&[r, j]) - x.at(&[r, j]).exp() / denom).abs() < 1e-12);
                total += y.at(&[r, j]);
            }
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let x = Tensor::<f32>::from_f64(&[1, 3], &[1000.0, 1000.0, -1000.0]).unwrap();
        let y = softmax_rows_forward(&x);
        assert!(y.first_non_finite().is_none());
        assert!((y.data()[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_cases() {
        let x = Tensor::<f64>::from_f64(&[2, 2], &[3.0, 4.0, 0.0, 0.0]).unwrap();
        let y = l2_normalize_rows_forward(&x, 1e-12);
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        assert_eq!(&y.data()[2..], &[0.0, 0.0]);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[20, 7], 2.0, &mut rng);
        let y = l2_normalize_rows_forward(&x, 1e-12);
        for r in 0..20 {
            assert!((row_norm(y.row(r)) - 1.0).abs() < 1e-9);
        }
    }

    fn channel_moments(y: &Tensor<f64>, ch: usize) -> (f64, f64) {
        let (b, c, hw) = (y.dim(0), y.dim(1), y.dim(2) * y.dim(3));
        let vals: Vec<f64> = (0..b)
            .flat_map(|n| y.data()[(n * c + ch) * hw..][..hw].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn batchnorm_training_normalizes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::randn(&[3, 2, 4, 4], 5.0, &mut rng));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let (y, stats) = batchnorm2d(&tape, x, g, b, BnMode::Train, 1e-5).unwrap();
        assert!(stats.is_some());
        let y = tape.value(y);
        for ch in 0..2 {
            let (m, v) = channel_moments(&y, ch);
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-6, "var {v}");
        }
    }

    #[test]
    fn batchnorm_constant_input_gives_zeros() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::full(&[1, 1, 1, 1], 4.2));
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let (y, _) = batchnorm2d(&tape, x, g, b, BnMode::Train, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);
    }

    #[test]
    fn batchnorm_eval_matches_scalar_formula() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::<f64>::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let gamma = Tensor::randn(&[3], 1.0, &mut rng);
        let beta = Tensor::randn(&[3], 1.0, &mut rng);
        let rm = Tensor::randn(&[3], 1.0, &mut rng);
        let rv = Tensor::rand_uniform(&[3], 0.5, 2.0, &mut rng);
        let y = batchnorm2d_eval_forward(&x, &gamma, &beta, &rm, &rv, 1e-5).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..2 {
                    for j in 0..2 {
                        let want = (x.at(&[n, c, i, j]) - rm.data()[c]) / (rv.data()[c] + 1e-5).sqrt()
                            * gamma.data()[c]
                            + beta.data()[c];
                        assert!((y.at(&[n, c, i, j]) - want).abs() < 1e-14);
                    }
                }
            }
        }
    }
}
