use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-output-index source taps `(i0, i1, w0, w1)` for half-pixel-centred resampling.
fn taps<T: Scalar>(extent: usize, factor: usize) -> Vec<(usize, usize, T, T)> {
    (0..extent * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(extent - 1);
            let i1 = (i0 + 1).min(extent - 1);
            let l1 = src - i0 as f64;
            (i0, i1, T::c(1.0 - l1), T::c(l1))
        })
        .collect()
}

/// Bilinear upsampling by an integer factor (align-corners off).
pub fn upsample_bilinear_forward<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(Error::shape("upsample_bilinear", x.shape(), &[0, 0, 0, 0]));
    }
    if factor == 0 {
        return Err(Error::Precondition("upsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (ho, wo) = (h * factor, w * factor);
    let ty = taps::<T>(h, factor);
    let tx = taps::<T>(w, factor);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(ho * wo)) {
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (r0, r1) = (&src[y0 * w..][..w], &src[y1 * w..][..w]);
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * wo + ox] =
                    wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    let _ = (b, c);
    Ok(out)
}

pub fn upsample_bilinear<T: Scalar>(tape: &Tape<T>, x: Var, factor: usize) -> Result<Var> {
    let xv = tape.value(x);
    let out = upsample_bilinear_forward(&xv, factor)?;
    if factor == 1 {
        return Ok(x);
    }
    let (h, w) = (xv.dim(2), xv.dim(3));
    let shape = xv.shape().to_vec();
    Ok(tape.record(out, &[x], || {
        Box::new(move |g, _| {
            let ty = taps::<T>(h, factor);
            let tx = taps::<T>(w, factor);
            let wo = w * factor;
            let mut dx = Tensor::zeros(&shape);
            for (gsrc, d) in g.data().chunks(h * factor * wo).zip(dx.data_mut().chunks_mut(h * w)) {
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let gv = gsrc[oy * wo + ox];
                        d[y0 * w + x0] = d[y0 * w + x0] + gv * wy0 * wx0;
                        d[y0 * w + x1] = d[y0 * w + x1] + gv * wy0 * wx1;
                        d[y1 * w + x0] = d[y1 * w + x0] + gv * wy1 * wx0;
                        d[y1 * w + x1] = d[y1 * w + x1] + gv * wy1 * wx1;
                    }
                }
            }
            vec![Some(dx)]
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_one_is_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 3], |i| i as f64);
        assert_eq!(upsample_bilinear_forward(&x, 1).unwrap(), x);
    }

    #[test]
    fn constants_stay_constant() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 2], 2.5);
        for f in [2, 3, 4] {
            let y = upsample_bilinear_forward(&x, f).unwrap();
            assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        }
    }

    #[test]
    fn two_by_two_hand_evaluated() {
        // Output coordinate o maps to source (o + 0.5)/2 - 0.5, clamped at 0:
        // o = 0 -> 0, 1 -> 0.25, 2 -> 0.75, 3 -> 1.25 (i0 = 1, i1 clamped to 1).
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = upsample_bilinear_forward(&x, 2).unwrap();
        let f = |r: f64, c: f64| {
            let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
            let row0 = lerp(0.0, 1.0, c);
            let row1 = lerp(2.0, 3.0, c);
            lerp(row0, row1, r)
        };
        let pos = [0.0, 0.25, 0.75, 1.0];
        for (i, &r) in pos.iter().enumerate() {
            for (j, &c) in pos.iter().enumerate() {
                assert!((y.at(&[0, 0, i, j]) - f(r, c)).abs() < 1e-15, "({i},{j})");
            }
        }
    }
}
