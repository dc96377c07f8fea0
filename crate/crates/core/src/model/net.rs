//! The dual-path network: a windowed-transformer global path, a CBR spatial
//! path, and an FPN-style aggregation head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, DOWNSAMPLE};
use super::layers::{Block, Cbr, Conv, PatchEmbed, PatchMerge};
use super::params::{Forward, Mode, ParamStore};
use crate::autodiff::{add, concat_channels, upsample_bilinear, Conv2dSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const IN_CHANNELS: usize = 3;

#[derive(Debug, Clone)]
pub struct BuildFormer<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub embed: PatchEmbed,
    pub stages: Vec<Vec<Block>>,
    pub merges: Vec<PatchMerge>,
    pub scp: Vec<Cbr>,
    pub laterals: Vec<Conv>,
    pub fpn: Vec<Cbr>,
    pub fuse: Cbr,
    pub head: Conv,
}

impl<T: Scalar> BuildFormer<T> {
    /// Build and randomly initialize; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let ch = config.stage_channels;
        let heads = config.heads();

        let embed = PatchEmbed::new(s, "gcp.embed", IN_CHANNELS, ch[0], rng);
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for i in 0..4 {
            if i > 0 {
                merges.push(PatchMerge::new(s, &format!("gcp.merge{i}"), ch[i - 1], rng));
            }
            let blocks = (0..config.stage_depths[i])
                .map(|j| {
                    Block::new(
                        s,
                        &format!("gcp.stage{}.block{j}", i + 1),
                        ch[i],
                        heads[i],
                        config.window_side,
                        config.mlp_ratio,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }

        let mut scp = Vec::new();
        let mut cin = IN_CHANNELS;
        for (i, (&c, &st)) in config.scp_channels.iter().zip(&config.scp_strides).enumerate() {
            scp.push(Cbr::new(s, &format!("scp.cbr{i}"), cin, c, 3, st, rng));
            cin = c;
        }

        let pw = Conv2dSpec::default();
        let laterals = (0..4)
            .map(|i| Conv::new(s, &format!("cam.lateral{i}"), ch[i], config.fpn_dim, 1, pw, true, rng))
            .collect();
        let fpn = (0..4)
            .map(|i| Cbr::new(s, &format!("cam.fpn{i}"), config.fpn_dim, config.fpn_dim, 3, 1, rng))
            .collect();
        let fuse = Cbr::new(s, "cam.fuse", config.fpn_dim + cin, config.head_hidden, 3, 1, rng);
        let head = Conv::new(s, "head.conv", config.head_hidden, 1, 1, pw, true, rng);

        Ok(BuildFormer {
            config,
            store,
            embed,
            stages,
            merges,
            scp,
            laterals,
            fpn,
            fuse,
            head,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    fn check_input(&self, f: &Forward<'_, T>, img: Var) -> Result<()> {
        let s = f.tape.shape(img);
        let [_, c, h, w] = s[..] else {
            return Err(Error::shape("forward", &s, &[0, IN_CHANNELS, 0, 0]));
        };
        if c != IN_CHANNELS {
            return Err(Error::shape("forward", &s, &[0, IN_CHANNELS, 0, 0]));
        }
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
            return Err(Error::Precondition(format!(
                "input {h}x{w} is not divisible by {DOWNSAMPLE}; pad it first (pad_to_multiple)"
            )));
        }
        Ok(())
    }

    /// Feature maps after each of the four stages (1/4 .. 1/32).
    pub fn gcp_forward(&self, f: &Forward<'_, T>, img: Var) -> Result<[Var; 4]> {
        let mut x = self.embed.forward(f, img)?;
        let mut out = [x; 4];
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                x = self.merges[i - 1].forward(f, x)?;
            }
            for b in blocks {
                x = b.forward(f, x)?;
            }
            out[i] = x;
        }
        Ok(out)
    }

    /// Six CBR blocks, ending at 1/4 resolution.
    pub fn scp_forward(&self, f: &Forward<'_, T>, img: Var) -> Result<Var> {
        let mut x = img;
        for cbr in &self.scp {
            x = cbr.forward(f, x)?;
        }
        Ok(x)
    }

    pub fn context_aggregate(&self, f: &Forward<'_, T>, feats: &[Var; 4], fs: Var) -> Result<Var> {
        let s = f.tape.shape(fs);
        for (i, &fi) in feats.iter().enumerate() {
            let si = f.tape.shape(fi);
            if si.len() != 4 || si[2] << i != s[2] || si[3] << i != s[3] {
                return Err(Error::Config(format!(
                    "aggregation level {i} has shape {si:?}, expected 1/{} of {:?}",
                    1 << i,
                    &s[2..]
                )));
            }
        }
        let mut p = self.laterals[3].forward(f, feats[3])?;
        p = self.fpn[3].forward(f, p)?;
        for i in (0..3).rev() {
            let up = upsample_bilinear(f.tape, p, 2)?;
            let lat = self.laterals[i].forward(f, feats[i])?;
            p = self.fpn[i].forward(f, add(f.tape, up, lat)?)?;
        }
        let cat = concat_channels(f.tape, &[p, fs])?;
        self.fuse.forward(f, cat)
    }

    /// Full-resolution logits `[B, 1, H, W]`.
    pub fn forward(&self, f: &Forward<'_, T>, img: Var) -> Result<Var> {
        self.check_input(f, img)?;
        let feats = self.gcp_forward(f, img)?;
        let fs = self.scp_forward(f, img)?;
        let agg = self.context_aggregate(f, &feats, fs)?;
        let logits = self.head.forward(f, agg)?;
        upsample_bilinear(f.tape, logits, 4)
    }

    /// Eval-mode logits without recording gradients.
    pub fn predict(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let f = Forward::new(&tape, &self.store, Mode::Eval, false);
        let x = tape.constant(img.clone());
        let y = self.forward(&f, x)?;
        Ok((*tape.value(y)).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes(model: &BuildFormer<f32>, img: &Tensor<f32>) -> Vec<Vec<usize>> {
        let tape = Tape::no_grad();
        let f = Forward::new(&tape, &model.store, Mode::Eval, false);
        let x = tape.constant(img.clone());
        let feats = model.gcp_forward(&f, x).unwrap();
        let mut out: Vec<Vec<usize>> = feats.iter().map(|&v| tape.shape(v)).collect();
        out.push(tape.shape(model.scp_forward(&f, x).unwrap()));
        out.push(tape.shape(model.forward(&f, x).unwrap()));
        out
    }

    #[test]
    fn toy_shapes_on_64() {
        let m = BuildFormer::<f32>::new(ModelConfig::toy(), 0).unwrap();
        let img = Tensor::full(&[1, 3, 64, 64], 0.5);
        assert_eq!(
            shapes(&m, &img),
            vec![
                vec![1, 96, 16, 16],
                vec![1, 192, 8, 8],
                vec![1, 384, 4, 4],
                vec![1, 768, 2, 2],
                vec![1, 32, 16, 16],
                vec![1, 1, 64, 64],
            ]
        );
    }

    #[test]
    fn large_window_on_small_map_is_shape_correct() {
        let mut cfg = ModelConfig::toy();
        cfg.window_side = 16;
        let m = BuildFormer::<f32>::new(cfg, 1).unwrap();
        let img = Tensor::full(&[1, 3, 64, 64], 0.25);
        assert_eq!(shapes(&m, &img)[3], vec![1, 768, 2, 2]);
    }

    #[test]
    fn indivisible_input_asks_for_padding() {
        let m = BuildFormer::<f32>::new(ModelConfig::toy(), 2).unwrap();
        let err = m.predict(&Tensor::zeros(&[1, 3, 48, 64])).unwrap_err();
        assert!(matches!(err, Error::Precondition(ref s) if s.contains("pad")));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = BuildFormer::<f32>::new(ModelConfig::toy(), 3).unwrap();
        let m2 = BuildFormer::<f32>::new(ModelConfig::toy(), 3).unwrap();
        let img = Tensor::from_fn(&[1, 3, 32, 32], |i| ((i * 7919) % 97) as f32 / 97.0);
        let a = m.predict(&img).unwrap();
        assert_eq!(a, m.predict(&img).unwrap());
        assert_eq!(a, m2.predict(&img).unwrap());
    }

    #[test]
    fn parameter_names_are_dotted_paths() {
        let m = BuildFormer::<f32>::new(ModelConfig::toy(), 4).unwrap();
        let names: Vec<&str> = m.store.params().iter().map(|p| p.name.as_str()).collect();
        assert!(names.contains(&"gcp.stage2.block0.wq"));
        assert!(names.contains(&"gcp.stage3.block1.mlp.fc2.w"));
        assert!(names.contains(&"cam.fuse.bn.gamma"));
        assert_eq!(names.last(), Some(&"head.conv.b"));
    }
}
