//! Central finite-difference validation of analytic gradients.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{weighted_sum, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Check at most this many elements per input (chosen by `seed`); `None` checks all.
    pub max_elements_per_input: Option<usize>,
    /// Seed for the output weighting and element sampling.
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: DEFAULT_STEP,
            max_elements_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    /// max over checked elements of |g_a - g_n| / max(1, |g_a|, |g_n|)
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradcheckReport {
    fn empty() -> Self {
        GradcheckReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            checked: 0,
        }
    }

    fn update(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
        if err > self.max_rel_error || self.checked == 0 {
            self.max_rel_error = err;
            self.worst = (input, elem);
        }
        self.checked += 1;
    }

    pub fn merge(&mut self, other: &GradcheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Element indices to check for a tensor of `n` elements.
pub fn sample_indices(n: usize, max: Option<usize>, rng: &mut impl Rng) -> Vec<usize> {
    match max {
        Some(k) if k < n => {
            let mut idx: Vec<usize> = rand::seq::index::sample(rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Compare the tape gradient of `op` against central differences.
///
/// Non-scalar outputs are reduced as `sum(r * y)` with fixed random `r`, so
/// that gradients of normalized outputs (e.g. softmax rows) do not cancel.
pub fn gradcheck<F>(op: F, inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op(&tape, &vars)?;
    let out_shape = tape.shape(out);
    let weights = Arc::new(Tensor::rand_uniform(&out_shape, -1.0, 1.0, &mut rng));
    let loss = if out_shape.iter().product::<usize>() == 1 {
        out
    } else {
        weighted_sum(&tape, out, Arc::clone(&weights))?
    };
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let t = Tape::no_grad();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let y = op(&t, &vs)?;
        let yv = t.value(y);
        Ok(if yv.numel() == 1 {
            yv.item()
        } else {
            yv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        })
    };

    let mut report = GradcheckReport::empty();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, (input, &v)) in inputs.iter().zip(&vars).enumerate() {
        let zero = Tensor::zeros(input.shape());
        let analytic = grads.get(v).unwrap_or(&zero);
        if let Some(bad) = analytic.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("analytic gradient of input {i}"),
                index: bad,
            });
        }
        for e in sample_indices(input.numel(), opts.max_elements_per_input, &mut rng) {
            let x0 = input.data()[e];
            work[i].data_mut()[e] = x0 + opts.step;
            let up = eval(&work)?;
            work[i].data_mut()[e] = x0 - opts.step;
            let down = eval(&work)?;
            work[i].data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * opts.step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("numeric gradient of input {i}"),
                    index: e,
                });
            }
            report.update(i, e, analytic.data()[e], numeric);
        }
    }
    Ok(report)
}

/// Tolerance for ops that are linear in each input.
pub const LINEAR_TOL: f64 = 1e-7;
/// Tolerance for everything else.
pub const NONLINEAR_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradcheckReport,
}

impl OpCheck {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

/// Values in `[lo, hi)` kept at least `gap` away from each of `kinks`.
fn away_from(shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
}

fn binary(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

type OpFn = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>;

/// Every differentiable op, each on small random inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    use crate::attention::{attention, partition, reverse, AttentionKernel, WindowLayout};
    use crate::autodiff::*;
    use crate::loss::{bce_probs, bce_with_logits, dice_loss, joint_loss, laplacian_boundary, DICE_SMOOTH};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases: Vec<(&'static str, f64, OpFn, Vec<Tensor<f64>>)> = Vec::new();
    let mut case = |name, tol, f: OpFn, inputs: Vec<Tensor<f64>>| cases.push((name, tol, f, inputs));
    let lin = LINEAR_TOL;
    let nl = NONLINEAR_TOL;

    case("add", lin, Box::new(|t, v| add(t, v[0], v[1])), vec![Tensor::randn(&[3, 4], 1.0, r), Tensor::randn(&[3, 4], 1.0, r)]);
    case("scale", lin, Box::new(|t, v| Ok(scale(t, v[0], -1.7))), vec![Tensor::randn(&[5], 1.0, r)]);
    case("sum_all", lin, Box::new(|t, v| Ok(sum_all(t, v[0]))), vec![Tensor::randn(&[2, 3], 1.0, r)]);
    let w = Arc::new(Tensor::randn(&[2, 3], 1.0, r));
    case("weighted_sum", lin, Box::new(move |t, v| weighted_sum(t, v[0], Arc::clone(&w))), vec![Tensor::randn(&[2, 3], 1.0, r)]);
    case("reshape", lin, Box::new(|t, v| reshape(t, v[0], &[6, 2])), vec![Tensor::randn(&[3, 4], 1.0, r)]);
    case("permute", lin, Box::new(|t, v| permute(t, v[0], &[2, 0, 1])), vec![Tensor::randn(&[2, 3, 4], 1.0, r)]);
    case("pad_hw", lin, Box::new(|t, v| pad_hw(t, v[0], 2, 1)), vec![Tensor::randn(&[1, 2, 3, 3], 1.0, r)]);
    case("crop_hw", lin, Box::new(|t, v| crop_hw(t, v[0], 2, 3)), vec![Tensor::randn(&[1, 2, 4, 4], 1.0, r)]);
    case(
        "concat_channels",
        lin,
        Box::new(|t, v| concat_channels(t, &[v[0], v[1]])),
        vec![Tensor::randn(&[2, 1, 3, 3], 1.0, r), Tensor::randn(&[2, 2, 3, 3], 1.0, r)],
    );
    case("bmm", lin, Box::new(|t, v| bmm(t, v[0], v[1])), vec![Tensor::randn(&[2, 3, 4], 1.0, r), Tensor::randn(&[2, 4, 5], 1.0, r)]);
    case("matmul", lin, Box::new(|t, v| matmul(t, v[0], v[1])), vec![Tensor::randn(&[4, 3], 1.0, r), Tensor::randn(&[3, 2], 1.0, r)]);
    case(
        "linear",
        lin,
        Box::new(|t, v| linear(t, v[0], v[1], Some(v[2]))),
        vec![Tensor::randn(&[5, 3], 1.0, r), Tensor::randn(&[3, 4], 1.0, r), Tensor::randn(&[4], 1.0, r)],
    );
    case(
        "conv2d",
        lin,
        Box::new(|t, v| conv2d(t, v[0], v[1], Some(v[2]), Conv2dSpec { stride: 2, pad: 1, groups: 1 })),
        vec![Tensor::randn(&[2, 3, 6, 5], 1.0, r), Tensor::randn(&[4, 3, 3, 3], 0.5, r), Tensor::randn(&[4], 1.0, r)],
    );
    case(
        "conv2d_depthwise",
        lin,
        Box::new(|t, v| conv2d(t, v[0], v[1], None, Conv2dSpec { stride: 1, pad: 1, groups: 4 })),
        vec![Tensor::randn(&[1, 4, 5, 5], 1.0, r), Tensor::randn(&[4, 1, 3, 3], 0.5, r)],
    );
    case("upsample_bilinear", lin, Box::new(|t, v| upsample_bilinear(t, v[0], 4)), vec![Tensor::randn(&[1, 2, 3, 2], 1.0, r)]);
    case(
        "window_partition",
        lin,
        Box::new(|t, v| partition(t, v[0], &WindowLayout::new(5, 7, 3)?)),
        vec![Tensor::randn(&[2, 3, 5, 7], 1.0, r)],
    );
    case(
        "window_reverse",
        lin,
        Box::new(|t, v| reverse(t, v[0], &WindowLayout::new(5, 7, 3)?)),
        vec![Tensor::randn(&[2 * 6, 9, 3], 1.0, r)],
    );
    case("laplacian_boundary", lin, Box::new(|t, v| laplacian_boundary(t, v[0])), vec![Tensor::randn(&[2, 1, 5, 6], 1.0, r)]);

    case("relu6", nl, Box::new(|t, v| Ok(relu6(t, v[0]))), vec![away_from(&[40], -3.0, 9.0, &[0.0, 6.0], 1e-3, r)]);
    case("sigmoid", nl, Box::new(|t, v| Ok(sigmoid(t, v[0]))), vec![Tensor::randn(&[20], 3.0, r)]);
    case("abs", nl, Box::new(|t, v| Ok(abs(t, v[0]))), vec![away_from(&[20], -2.0, 2.0, &[0.0], 1e-3, r)]);
    case("clamp", nl, Box::new(|t, v| Ok(clamp(t, v[0], -0.5, 0.8))), vec![away_from(&[30], -2.0, 2.0, &[-0.5, 0.8], 1e-3, r)]);
    case("softmax_rows", nl, Box::new(|t, v| Ok(softmax_rows(t, v[0]))), vec![Tensor::randn(&[3, 5], 2.0, r)]);
    case("l2_normalize_rows", nl, Box::new(|t, v| Ok(l2_normalize_rows(t, v[0], 1e-12))), vec![Tensor::randn(&[4, 6], 1.0, r)]);
    case(
        "batchnorm2d_train",
        nl,
        Box::new(|t, v| Ok(batchnorm2d(t, v[0], v[1], v[2], BnMode::Train, 1e-5)?.0)),
        vec![Tensor::randn(&[3, 2, 3, 3], 1.5, r), Tensor::randn(&[2], 1.0, r), Tensor::randn(&[2], 1.0, r)],
    );
    let (rm, rv) = (Tensor::randn(&[2], 1.0, r), Tensor::rand_uniform(&[2], 0.5, 2.0, r));
    case(
        "batchnorm2d_eval",
        lin,
        Box::new(move |t, v| {
            let mode = BnMode::Eval { running_mean: &rm, running_var: &rv };
            Ok(batchnorm2d(t, v[0], v[1], v[2], mode, 1e-5)?.0)
        }),
        vec![Tensor::randn(&[2, 2, 3, 3], 1.0, r), Tensor::randn(&[2], 1.0, r), Tensor::randn(&[2], 1.0, r)],
    );
    let qkv = |r: &mut ChaCha8Rng| (0..3).map(|_| Tensor::randn(&[2, 6, 4], 1.0, r)).collect::<Vec<_>>();
    case(
        "attention_exact",
        nl,
        Box::new(|t, v| attention(t, v[0], v[1], v[2], AttentionKernel::Exact { scale: 2.0 }, 2, None)),
        qkv(r),
    );
    case("attention_linear", nl, Box::new(|t, v| attention(t, v[0], v[1], v[2], AttentionKernel::Linear, 2, None)), qkv(r));

    let (tgt, valid) = (binary(&[1, 1, 5, 5], 0.4, r), Tensor::from_fn(&[1, 1, 5, 5], |i| (i % 5 < 4) as u8 as f64));
    let (t1, v1) = (tgt.clone(), valid.clone());
    case(
        "bce_with_logits",
        nl,
        Box::new(move |t, v| Ok(bce_with_logits(t, v[0], &t1, &v1)?.var)),
        vec![Tensor::randn(&[1, 1, 5, 5], 2.0, r)],
    );
    let (t2, v2) = (tgt.clone(), valid.clone());
    case(
        "bce_probs",
        nl,
        Box::new(move |t, v| Ok(bce_probs(t, v[0], &t2, &v2)?.var)),
        vec![Tensor::rand_uniform(&[1, 1, 5, 5], 0.05, 0.95, r)],
    );
    let (t3, v3) = (tgt.clone(), valid.clone());
    case(
        "dice_loss",
        nl,
        Box::new(move |t, v| dice_loss(t, v[0], &t3, &v3, DICE_SMOOTH)),
        vec![Tensor::rand_uniform(&[1, 1, 5, 5], 0.05, 0.95, r)],
    );
    case(
        "joint_loss",
        nl,
        Box::new(move |t, v| Ok(joint_loss(t, v[0], &tgt, &valid)?.var)),
        vec![Tensor::randn(&[1, 1, 5, 5], 1.5, r)],
    );

    let opts = GradcheckOptions { seed, ..Default::default() };
    cases
        .into_iter()
        .map(|(name, tolerance, f, inputs)| {
            let report = gradcheck(|t, v| f(t, v), &inputs, &opts)?;
            Ok(OpCheck { name, tolerance, report })
        })
        .collect()
}

/// Gradcheck of the whole network in training mode on a `[2,3,size,size]`
/// input: the image and `per_tensor` sampled elements of every parameter.
pub fn model_gradcheck(config: &crate::model::ModelConfig, seed: u64, size: usize, per_tensor: usize) -> Result<GradcheckReport> {
    use crate::model::{BuildFormer, Forward, Mode};
    let model = BuildFormer::<f64>::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut inputs = model.store.tensors();
    let n = inputs.len();
    inputs.push(Tensor::rand_uniform(&[2, 3, size, size], 0.0, 1.0, &mut rng));
    let opts = GradcheckOptions { max_elements_per_input: Some(per_tensor), seed, ..Default::default() };
    gradcheck(
        |t, v| {
            let f = Forward::from_vars(t, &model.store, v[..n].to_vec(), Mode::Train);
            model.forward(&f, v[n])
        },
        &inputs,
        &opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{matmul, relu6};

    #[test]
    fn every_op_passes() {
        for c in op_suite(3).unwrap() {
            assert!(c.passes(), "{} {:?}", c.name, c.report);
            assert!(c.report.checked > 0);
        }
    }

    #[test]
    fn relu6_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[50], |_| {
            let mut v: f64 = rng.random_range(-3.0..9.0);
            while v.abs() < 1e-3 || (v - 6.0).abs() < 1e-3 {
                v = rng.random_range(-3.0..9.0);
            }
            v
        });
        let r = gradcheck(|t, v| Ok(relu6(t, v[0])), &[x], &GradcheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert_eq!(r.checked, 50);
    }

    #[test]
    fn matmul_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let r = gradcheck(|t, v| matmul(t, v[0], v[1]), &[a, b], &GradcheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        use crate::autodiff::scale;
        // y = 2x on the tape, but the numeric path sees the same op, so break it
        // by making the op depend on whether gradients are enabled.
        let x = Tensor::full(&[3], 1.0);
        let r = gradcheck(
            |t, v| Ok(scale(t, v[0], if t.grad_enabled() { 2.0 } else { 3.0 })),
            &[x],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error > 0.1);
    }
}
