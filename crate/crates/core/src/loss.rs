//! Joint segmentation loss: BCE on logits, Dice on probabilities, and BCE on
//! Laplacian boundary maps.

use std::sync::Arc;

use crate::autodiff::{abs, clamp, conv2d, sigmoid, Conv2dSpec, Tape, Var};
use crate::autodiff::sigmoid_scalar;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 3x3 Laplacian stencil, row-major.
pub const LAPLACIAN: [f64; 9] = [-1.0, -1.0, -1.0, -1.0, 8.0, -1.0, -1.0, -1.0, -1.0];
/// Probability clamp inside the boundary BCE.
pub const PROB_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;

fn check_map<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<()> {
    if x.ndim() != 4 || x.dim(1) != 1 {
        return Err(Error::shape(op, x.shape(), &[0, 1, 0, 0]));
    }
    Ok(())
}

fn check_same<T: Scalar>(op: &'static str, a: &[usize], b: &Tensor<T>) -> Result<()> {
    if a != b.shape() {
        return Err(Error::shape(op, a, b.shape()));
    }
    Ok(())
}

/// `clamp(|L * map|, 0, 1)` with zero padding.
pub fn laplacian_boundary<T: Scalar>(tape: &Tape<T>, map: Var) -> Result<Var> {
    check_map("laplacian_boundary", &tape.value(map))?;
    let k = tape.constant(Tensor::from_f64(&[1, 1, 3, 3], &LAPLACIAN)?);
    let y = conv2d(tape, map, k, None, Conv2dSpec::new(1, 1, 1))?;
    let y = abs(tape, y);
    Ok(clamp(tape, y, T::zero(), T::one()))
}

pub fn laplacian_boundary_forward<T: Scalar>(map: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let m = tape.constant(map.clone());
    let y = laplacian_boundary(&tape, m)?;
    Ok((*tape.value(y)).clone())
}

/// Elementwise product with a fixed tensor.
pub fn mul_const<T: Scalar>(tape: &Tape<T>, a: Var, w: &Tensor<T>) -> Result<Var> {
    let av = tape.value(a);
    check_same("mul_const", av.shape(), w)?;
    let out = av.zip_map(w, |x, y| x * y)?;
    let w = Arc::new(w.clone());
    Ok(tape.record(out, &[a], || {
        Box::new(move |g, _| vec![Some(g.zip_map(&w, |x, y| x * y).expect("mul_const grad"))])
    }))
}

/// A scalar loss and whether it was degenerate (no valid pixels).
#[derive(Debug, Clone, Copy)]
pub struct LossValue {
    pub var: Var,
    pub degenerate: bool,
}

fn valid_count<T: Scalar>(valid: &Tensor<T>) -> f64 {
    valid.data().iter().map(|v| v.f64()).sum()
}

/// Mean over valid pixels of `max(x,0) - x t + ln(1 + e^{-|x|})`.
pub fn bce_with_logits<T: Scalar>(tape: &Tape<T>, logits: Var, targets: &Tensor<T>, valid: &Tensor<T>) -> Result<LossValue> {
    let xv = tape.value(logits);
    check_same("bce_with_logits", xv.shape(), targets)?;
    check_same("bce_with_logits", xv.shape(), valid)?;
    let n = valid_count(valid);
    if n == 0.0 {
        log::warn!("bce_with_logits: no valid pixels, loss defined as 0");
        return Ok(LossValue {
            var: tape.constant(Tensor::scalar(T::zero())),
            degenerate: true,
        });
    }
    let mut s = T::zero();
    for ((&x, &t), &m) in xv.data().iter().zip(targets.data()).zip(valid.data()) {
        if m != T::zero() {
            let l = x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln();
            s = s + m * l;
        }
    }
    let inv = T::c(1.0 / n);
    let (t, m) = (Arc::new(targets.clone()), Arc::new(valid.clone()));
    let var = tape.record(Tensor::scalar(s * inv), &[logits], || {
        Box::new(move |g, _| {
            let gs = g.item() * inv;
            let dx = Tensor::from_fn(xv.shape(), |i| {
                let mi = m.data()[i];
                if mi == T::zero() {
                    T::zero()
                } else {
                    gs * mi * (sigmoid_scalar(xv.data()[i]) - t.data()[i])
                }
            });
            vec![Some(dx)]
        })
    });
    Ok(LossValue { var, degenerate: false })
}

/// Mean over valid pixels of `-(t ln p + (1-t) ln(1-p))` with
/// `p` clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce_probs<T: Scalar>(tape: &Tape<T>, probs: Var, targets: &Tensor<T>, valid: &Tensor<T>) -> Result<LossValue> {
    let pv = tape.value(probs);
    check_same("bce_probs", pv.shape(), targets)?;
    check_same("bce_probs", pv.shape(), valid)?;
    let n = valid_count(valid);
    if n == 0.0 {
        log::warn!("bce_probs: no valid pixels, loss defined as 0");
        return Ok(LossValue {
            var: tape.constant(Tensor::scalar(T::zero())),
            degenerate: true,
        });
    }
    let (lo, hi) = (T::c(PROB_EPS), T::c(1.0 - PROB_EPS));
    let mut s = T::zero();
    for ((&p, &t), &m) in pv.data().iter().zip(targets.data()).zip(valid.data()) {
        if m != T::zero() {
            let pc = p.max(lo).min(hi);
            s = s - m * (t * pc.ln() + (T::one() - t) * (T::one() - pc).ln());
        }
    }
    let inv = T::c(1.0 / n);
    let (t, m) = (Arc::new(targets.clone()), Arc::new(valid.clone()));
    let var = tape.record(Tensor::scalar(s * inv), &[probs], || {
        Box::new(move |g, _| {
            let gs = g.item() * inv;
            let dp = Tensor::from_fn(pv.shape(), |i| {
                let (p, ti, mi) = (pv.data()[i], t.data()[i], m.data()[i]);
                if mi == T::zero() || p <= lo || p >= hi {
                    T::zero()
                } else {
                    gs * mi * ((T::one() - ti) / (T::one() - p) - ti / p)
                }
            });
            vec![Some(dp)]
        })
    });
    Ok(LossValue { var, degenerate: false })
}

/// `1 - (2 Σ p g + s) / (Σ p + Σ g + s)` over valid pixels.
pub fn dice_loss<T: Scalar>(tape: &Tape<T>, probs: Var, targets: &Tensor<T>, valid: &Tensor<T>, smooth: f64) -> Result<Var> {
    let pv = tape.value(probs);
    check_same("dice_loss", pv.shape(), targets)?;
    check_same("dice_loss", pv.shape(), valid)?;
    let (mut inter, mut sp, mut sg) = (T::zero(), T::zero(), T::zero());
    for ((&p, &g), &m) in pv.data().iter().zip(targets.data()).zip(valid.data()) {
        inter = inter + m * p * g;
        sp = sp + m * p;
        sg = sg + m * g;
    }
    let s = T::c(smooth);
    let num = T::c(2.0) * inter + s;
    let den = sp + sg + s;
    let (t, m) = (Arc::new(targets.clone()), Arc::new(valid.clone()));
    Ok(tape.record(Tensor::scalar(T::one() - num / den), &[probs], || {
        Box::new(move |g, _| {
            // d/dp_i of -num/den = -(2 g_i den - num) m_i / den^2
            let gs = g.item();
            let den2 = den * den;
            let dp = Tensor::from_fn(pv.shape(), |i| {
                let (gi, mi) = (t.data()[i], m.data()[i]);
                -gs * mi * (T::c(2.0) * gi * den - num) / den2
            });
            vec![Some(dp)]
        })
    }))
}

/// Values of the three loss terms and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    pub boundary: f64,
}

pub struct JointLoss {
    pub var: Var,
    pub terms: LossTerms,
    pub degenerate: bool,
}

/// Sum of BCE on logits, Dice on probabilities, and BCE between the boundary
/// map of the masked probabilities and the binarized boundary of the target.
pub fn joint_loss<T: Scalar>(tape: &Tape<T>, logits: Var, target: &Tensor<T>, valid: &Tensor<T>) -> Result<JointLoss> {
    check_map("joint_loss", &tape.value(logits))?;
    let ce = bce_with_logits(tape, logits, target, valid)?;
    let probs = sigmoid(tape, logits);
    let dice = dice_loss(tape, probs, target, valid, DICE_SMOOTH)?;

    let masked = mul_const(tape, probs, valid)?;
    let pred_edge = laplacian_boundary(tape, masked)?;
    let target_edge = laplacian_boundary_forward(&target.zip_map(valid, |a, b| a * b)?)?
        .map(|v| if v > T::zero() { T::one() } else { T::zero() });
    let boundary = bce_probs(tape, pred_edge, &target_edge, valid)?;

    let value = |v: Var| tape.value(v).item().f64();
    let terms = LossTerms {
        ce: value(ce.var),
        dice: value(dice),
        boundary: value(boundary.var),
        total: 0.0,
    };
    let var = crate::autodiff::add(tape, ce.var, dice)?;
    let var = crate::autodiff::add(tape, var, boundary.var)?;
    Ok(JointLoss {
        var,
        terms: LossTerms {
            total: value(var),
            ..terms
        },
        degenerate: ce.degenerate || boundary.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, GradcheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[1, 1, h, w], v).unwrap()
    }

    fn scalar_loss(f: impl Fn(&Tape<f64>, Var) -> Var, x: &Tensor<f64>) -> f64 {
        let tape = Tape::no_grad();
        let v = tape.constant(x.clone());
        tape.value(f(&tape, v)).item()
    }

    #[test]
    fn boundary_of_constant_and_single_pixel() {
        let ones = Tensor::full(&[1, 1, 5, 5], 1.0);
        let b = laplacian_boundary_forward(&ones).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let interior = (1..4).contains(&i) && (1..4).contains(&j);
                assert_eq!(b.at(&[0, 0, i, j]), if interior { 0.0 } else { 1.0 });
            }
        }
        let mut dot = Tensor::zeros(&[1, 1, 5, 5]);
        dot.set(&[0, 0, 2, 2], 1.0);
        let b = laplacian_boundary_forward(&dot).unwrap();
        for i in 0..5usize {
            for j in 0..5usize {
                let near = i.abs_diff(2) <= 1 && j.abs_diff(2) <= 1;
                assert_eq!(b.at(&[0, 0, i, j]), if near { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn bce_closed_forms() {
        let z = map(1, 2, &[0.0, 0.0]);
        let half = map(1, 2, &[0.5, 0.5]);
        let v = Tensor::full(&[1, 1, 1, 2], 1.0);
        let l = scalar_loss(|t, x| bce_with_logits(t, x, &half, &v).unwrap().var, &z);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let big = map(1, 2, &[50.0, 50.0]);
        let ones = Tensor::full(&[1, 1, 1, 2], 1.0);
        let l = scalar_loss(|t, x| bce_with_logits(t, x, &ones, &v).unwrap().var, &big);
        assert!(l >= 0.0 && l < 1e-20);
        let tape = Tape::no_grad();
        let x = tape.constant(big);
        assert!(bce_with_logits(&tape, x, &ones, &Tensor::zeros(&[1, 1, 1, 2])).unwrap().degenerate);
    }

    #[test]
    fn bce_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 1, 4, 4], 3.0, &mut rng);
        let t = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.random_range(0.0..1.0));
        let v = Tensor::from_fn(&[2, 1, 4, 4], |i| if i % 5 == 0 { 0.0 } else { 1.0 });
        let got = scalar_loss(|tp, xv| bce_with_logits(tp, xv, &t, &v).unwrap().var, &x);
        let (mut s, mut n) = (0.0, 0.0);
        for i in 0..32 {
            if v.data()[i] == 1.0 {
                let p = 1.0 / (1.0 + (-x.data()[i]).exp());
                let ti = t.data()[i];
                s -= ti * p.ln() + (1.0 - ti) * (1.0 - p).ln();
                n += 1.0;
            }
        }
        assert!((got - s / n).abs() < 1e-10);
    }

    #[test]
    fn dice_closed_forms() {
        let v = Tensor::full(&[1, 1, 2, 2], 1.0);
        let m = map(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        assert_eq!(scalar_loss(|t, x| dice_loss(t, x, &m, &v, 1.0).unwrap(), &m), 0.0);
        let p = map(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        let g = map(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        let l = scalar_loss(|t, x| dice_loss(t, x, &g, &v, 1.0).unwrap(), &p);
        assert!((l - (1.0 - 1.0 / 5.0)).abs() < 1e-15);
    }

    #[test]
    fn perfect_hard_predictions_have_tiny_loss() {
        let target = map(4, 4, &[0., 0., 0., 0., 0., 1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 0.]);
        let logits = target.map(|t| if t > 0.5 { 50.0 } else { -50.0 });
        let v = Tensor::full(&[1, 1, 4, 4], 1.0);
        let tape = Tape::no_grad();
        let x = tape.constant(logits);
        let j = joint_loss(&tape, x, &target, &v).unwrap();
        assert!(j.terms.total < 1e-3, "{:?}", j.terms);
        assert!(j.terms.ce >= 0.0 && j.terms.dice >= 0.0 && j.terms.boundary >= 0.0);
    }

    #[test]
    fn joint_loss_gradcheck() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn(&[1, 1, 6, 6], 1.5, &mut rng);
            let t = Tensor::from_fn(&[1, 1, 6, 6], |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
            let v = Tensor::from_fn(&[1, 1, 6, 6], |i| if i % 6 < 5 { 1.0 } else { 0.0 });
            let r = gradcheck(
                |tp, vs| Ok(joint_loss(tp, vs[0], &t, &v)?.var),
                &[x],
                &GradcheckOptions { seed, ..Default::default() },
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }
}
