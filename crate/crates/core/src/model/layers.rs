//! Building blocks of the network. Each layer registers its parameters in a
//! [`ParamStore`] at construction and reads them back through a [`Forward`].

use rand::Rng;

use super::params::{he_normal, scaled_normal, BufferId, Forward, ParamId, ParamStore};
use crate::attention::{check_heads, windowed_attention, Projections};
use crate::autodiff::{add, conv2d, relu6, Conv2dSpec, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let cg = cin / spec.groups;
        let fan_in = cg * k * k;
        let w = store.add(format!("{name}.w"), he_normal(&[cout, cg, k, k], fan_in, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[cout])));
        Conv { w, b, spec }
    }

    /// Depth-wise 3x3, stride 1, pad 1, no bias.
    pub fn depthwise<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        Conv::new(store, name, c, c, 3, Conv2dSpec::new(1, 1, c), false, rng)
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        conv2d(f.tape, x, f.p(self.w), self.b.map(|b| f.p(b)), self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[c], T::one())),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        f.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var)
    }
}

/// Convolution, batch norm, ReLU6.
#[derive(Debug, Clone)]
pub struct Cbr {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl Cbr {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let conv = Conv::new(store, &format!("{name}.conv"), cin, cout, k, Conv2dSpec::new(stride, k / 2, 1), false, rng);
        let bn = BatchNorm::new(store, &format!("{name}.bn"), cout);
        Cbr { conv, bn }
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        Ok(relu6(f.tape, y))
    }
}

fn residual_dw<T: Scalar>(f: &Forward<'_, T>, dw: &Conv, y: Var) -> Result<Var> {
    let r = dw.forward(f, y)?;
    add(f.tape, y, r)
}

fn spatial<T: Scalar>(f: &Forward<'_, T>, x: Var) -> Result<[usize; 4]> {
    let s = f.tape.shape(x);
    match s[..] {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::shape("feature map", &s, &[0, 0, 0, 0])),
    }
}

/// Two stride-2 CBR blocks to `out` channels at 1/4 resolution, then a
/// depth-wise residual `y + DW(y)`.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub cbr0: Cbr,
    pub cbr1: Cbr,
    pub dw: Conv,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, out: usize, rng: &mut impl Rng) -> Self {
        let mid = out / 2;
        PatchEmbed {
            cbr0: Cbr::new(store, &format!("{name}.cbr0"), cin, mid, 3, 2, rng),
            cbr1: Cbr::new(store, &format!("{name}.cbr1"), mid, out, 3, 2, rng),
            dw: Conv::depthwise(store, &format!("{name}.dw"), out, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = spatial(f, x)?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Precondition(format!(
                "patch embedding needs H and W divisible by 4, got {h}x{w}"
            )));
        }
        let y = self.cbr0.forward(f, x)?;
        let y = self.cbr1.forward(f, y)?;
        residual_dw(f, &self.dw, y)
    }
}

/// Batch norm, 2x2 stride-2 convolution to `2C`, depth-wise residual.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub bn: BatchNorm,
    pub conv: Conv,
    pub dw: Conv,
}

impl PatchMerge {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        PatchMerge {
            bn: BatchNorm::new(store, &format!("{name}.bn"), c),
            conv: Conv::new(store, &format!("{name}.conv"), c, 2 * c, 2, Conv2dSpec::new(2, 0, 1), true, rng),
            dw: Conv::depthwise(store, &format!("{name}.dw"), 2 * c, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = spatial(f, x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Precondition(format!("patch merging needs even H and W, got {h}x{w}")));
        }
        let y = self.bn.forward(f, x)?;
        let y = self.conv.forward(f, y)?;
        residual_dw(f, &self.dw, y)
    }
}

/// `1x1 (C -> rC) -> DW 3x3 -> ReLU6 -> 1x1 (rC -> C)` on the whole map.
#[derive(Debug, Clone)]
pub struct CMlp {
    pub fc1: Conv,
    pub dw: Conv,
    pub fc2: Conv,
}

impl CMlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, ratio: f64, rng: &mut impl Rng) -> Self {
        let hidden = ((c as f64 * ratio).round() as usize).max(1);
        let pw = Conv2dSpec::default();
        CMlp {
            fc1: Conv::new(store, &format!("{name}.fc1"), c, hidden, 1, pw, true, rng),
            dw: Conv::depthwise(store, &format!("{name}.dw"), hidden, rng),
            fc2: Conv::new(store, &format!("{name}.fc2"), hidden, c, 1, pw, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.fc1.forward(f, x)?;
        let y = self.dw.forward(f, y)?;
        let y = relu6(f.tape, y);
        self.fc2.forward(f, y)
    }
}

/// `y = x + W-LMHSA(BN(x)); z = y + C-MLP(BN(y))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: BatchNorm,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub norm2: BatchNorm,
    pub mlp: CMlp,
    pub heads: usize,
    pub window_side: usize,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        heads: usize,
        window_side: usize,
        mlp_ratio: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_heads(c, heads)?;
        let std = (1.0 / c as f64).sqrt();
        let norm1 = BatchNorm::new(store, &format!("{name}.norm1"), c);
        let wq = store.add(format!("{name}.wq"), scaled_normal(&[c, c], std, rng));
        let wk = store.add(format!("{name}.wk"), scaled_normal(&[c, c], std, rng));
        let wv = store.add(format!("{name}.wv"), scaled_normal(&[c, c], std, rng));
        let wo = store.add(format!("{name}.wo"), scaled_normal(&[c, c], std, rng));
        let norm2 = BatchNorm::new(store, &format!("{name}.norm2"), c);
        let mlp = CMlp::new(store, &format!("{name}.mlp"), c, mlp_ratio, rng);
        Ok(Block {
            norm1,
            wq,
            wk,
            wv,
            wo,
            norm2,
            mlp,
            heads,
            window_side,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let proj = Projections {
            wq: f.p(self.wq),
            wk: f.p(self.wk),
            wv: f.p(self.wv),
            wo: f.p(self.wo),
        };
        let n = self.norm1.forward(f, x)?;
        let a = f.with_meter_mut(|m| windowed_attention(f.tape, n, &proj, self.heads, self.window_side, f.kernel, m))?;
        let y = add(f.tape, x, a)?;
        let n = self.norm2.forward(f, y)?;
        let m = self.mlp.forward(f, n)?;
        add(f.tape, y, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::{gradcheck, GradcheckOptions};
    use crate::model::params::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run<L>(store: &ParamStore<f64>, x: &Tensor<f64>, mode: Mode, layer: L) -> Tensor<f64>
    where
        L: Fn(&Forward<'_, f64>, Var) -> Result<Var>,
    {
        let tape = Tape::no_grad();
        let f = Forward::new(&tape, store, mode, false);
        let xv = tape.constant(x.clone());
        let y = layer(&f, xv).unwrap();
        (*tape.value(y)).clone()
    }

    /// Gradcheck of a layer with respect to its input and every parameter.
    fn check<L>(store: &ParamStore<f64>, x: Tensor<f64>, mode: Mode, seed: u64, layer: L) -> f64
    where
        L: Fn(&Forward<'_, f64>, Var) -> Result<Var>,
    {
        let mut inputs = vec![x];
        inputs.extend(store.tensors());
        let opts = GradcheckOptions {
            max_elements_per_input: Some(12),
            seed,
            ..Default::default()
        };
        let r = gradcheck(
            |t, v| {
                let f = Forward::from_vars(t, store, v[1..].to_vec(), mode);
                layer(&f, v[0])
            },
            &inputs,
            &opts,
        )
        .unwrap();
        r.max_rel_error
    }

    fn zero(store: &mut ParamStore<f64>, id: ParamId) {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }

    #[test]
    fn patch_embed_shapes_and_zero_dw_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let pe = PatchEmbed::new(&mut store, "embed", 3, 16, &mut rng);
        let x = Tensor::randn(&[1, 3, 64, 64], 1.0, &mut rng);
        let y = run(&store, &x, Mode::Train, |f, v| pe.forward(f, v));
        assert_eq!(y.shape(), &[1, 16, 16, 16]);
        zero(&mut store, pe.dw.w);
        let y = run(&store, &x, Mode::Train, |f, v| pe.forward(f, v));
        let pre = run(&store, &x, Mode::Train, |f, v| {
            let a = pe.cbr0.forward(f, v)?;
            pe.cbr1.forward(f, a)
        });
        assert_eq!(y, pre);
        let bad = Tensor::zeros(&[1, 3, 30, 32]);
        let tape = Tape::no_grad();
        let f = Forward::new(&tape, &store, Mode::Eval, false);
        let xv = tape.constant(bad);
        assert!(matches!(pe.forward(&f, xv), Err(Error::Precondition(_))));
    }

    #[test]
    fn patch_merge_halves_and_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let pm = PatchMerge::new(&mut store, "merge", 6, &mut rng);
        let x = Tensor::randn(&[2, 6, 8, 6], 1.0, &mut rng);
        assert_eq!(run(&store, &x, Mode::Eval, |f, v| pm.forward(f, v)).shape(), &[2, 12, 4, 3]);
        zero(&mut store, pm.dw.w);
        let y = run(&store, &x, Mode::Eval, |f, v| pm.forward(f, v));
        let pre = run(&store, &x, Mode::Eval, |f, v| {
            let a = pm.bn.forward(f, v)?;
            pm.conv.forward(f, a)
        });
        assert_eq!(y, pre);
    }

    #[test]
    fn cmlp_keeps_shape_and_has_3x3_reach() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mlp = CMlp::new(&mut store, "mlp", 4, 2.0, &mut rng);
        let x = Tensor::randn(&[1, 4, 7, 7], 1.0, &mut rng);
        let y0 = run(&store, &x, Mode::Eval, |f, v| mlp.forward(f, v));
        assert_eq!(y0.shape(), x.shape());
        let mut x1 = x.clone();
        x1.set(&[0, 2, 3, 3], x.at(&[0, 2, 3, 3]) + 5.0);
        let y1 = run(&store, &x1, Mode::Eval, |f, v| mlp.forward(f, v));
        for i in 0usize..7 {
            for j in 0usize..7 {
                let near = i.abs_diff(3) <= 1 && j.abs_diff(3) <= 1;
                let changed = (0..4).any(|c| y0.at(&[0, c, i, j]) != y1.at(&[0, c, i, j]));
                assert_eq!(changed, near, "pixel ({i},{j})");
            }
        }
    }

    fn block(c: usize, heads: usize, side: usize, seed: u64) -> (ParamStore<f64>, Block) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let b = Block::new(&mut store, "block", c, heads, side, 2.0, &mut rng).unwrap();
        (store, b)
    }

    #[test]
    fn block_with_zeroed_output_projections_is_identity() {
        let (mut store, b) = block(8, 2, 4, 4);
        for id in [b.wo, b.mlp.fc2.w, b.mlp.fc2.b.unwrap()] {
            zero(&mut store, id);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 8, 6, 5], 1.0, &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            assert_eq!(run(&store, &x, mode, |f, v| b.forward(f, v)), x);
        }
    }

    #[test]
    fn block_is_finite_on_large_inputs() {
        let (store, b) = block(8, 2, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[2, 8, 8, 8], 100.0, &mut rng);
        assert!(run(&store, &x, Mode::Train, |f, v| b.forward(f, v)).first_non_finite().is_none());
    }

    #[test]
    fn block_mixes_across_windows_through_the_mlp() {
        let (store, b) = block(8, 2, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[1, 8, 8, 8], 1.0, &mut rng);
        let mut x1 = x.clone();
        // right edge of window (0,0)
        x1.set(&[0, 0, 1, 3], 4.0);
        let f = |x: &Tensor<f64>| run(&store, x, Mode::Eval, |f, v| b.forward(f, v));
        let (y0, y1) = (f(&x), f(&x1));
        let in_right_window = (0..8).any(|c| (0..4).any(|i| (4..8).any(|j| y0.at(&[0, c, i, j]) != y1.at(&[0, c, i, j]))));
        assert!(in_right_window);
        // attention alone keeps the perturbation inside its window
        let attn_only = |x: &Tensor<f64>| {
            run(&store, x, Mode::Eval, |f, v| {
                let proj = Projections { wq: f.p(b.wq), wk: f.p(b.wk), wv: f.p(b.wv), wo: f.p(b.wo) };
                windowed_attention(f.tape, v, &proj, b.heads, b.window_side, f.kernel, None)
            })
        };
        let (a0, a1) = (attn_only(&x), attn_only(&x1));
        assert!((0..8).all(|c| (0..4).all(|i| (4..8).all(|j| a0.at(&[0, c, i, j]) == a1.at(&[0, c, i, j])))));
    }

    #[test]
    fn layers_pass_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for seed in 0..2 {
            let (store, b) = block(8, 2, 4, 20 + seed);
            let x = Tensor::randn(&[2, 8, 6, 6], 1.0, &mut rng);
            let e = check(&store, x, Mode::Train, seed, |f, v| b.forward(f, v));
            assert!(e < 1e-4, "block {e}");
        }
        let mut store = ParamStore::new();
        let pm = PatchMerge::new(&mut store, "merge", 4, &mut rng);
        let x = Tensor::randn(&[2, 4, 4, 6], 1.0, &mut rng);
        let e = check(&store, x, Mode::Train, 3, |f, v| pm.forward(f, v));
        assert!(e < 1e-4, "merge {e}");
        let mut store = ParamStore::new();
        let mlp = CMlp::new(&mut store, "mlp", 4, 2.0, &mut rng);
        let x = Tensor::randn(&[1, 4, 5, 5], 1.0, &mut rng);
        let e = check(&store, x, Mode::Eval, 4, |f, v| mlp.forward(f, v));
        assert!(e < 1e-4, "cmlp {e}");
    }
}
