use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig};
use crate::autodiff::{sigmoid_scalar, Tape};
use crate::data::{collate, flip_augment, pad_to, pad_to_multiple, random_crop, SegSample};
use crate::error::{Error, Result};
use crate::loss::{joint_loss, LossTerms};
use crate::metrics::{tta_predict, ConfusionCounts, Flip, MetricReport, DEFAULT_THRESHOLD};
use crate::model::{BuildFormer, Checkpoint, Forward, Mode, ModelConfig, DOWNSAMPLE};
use crate::tensor::{Scalar, Tensor};

pub const FINE_TUNE_LR: f64 = 5e-4;
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_LOG: &str = "eval_log.csv";
pub const LAST_CHECKPOINT: &str = "last.bfck";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub epochs: usize,
    /// Length of the learning-rate schedule in epochs, if longer than `epochs`:
    /// the run then covers only the first `epochs` epochs of that schedule.
    pub schedule_epochs: Option<usize>,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    /// Square random crop after padding; `None` trains on whole padded tiles.
    pub crop_size: Option<usize>,
    /// Checkpoint (and validate) every this many epochs; 0 means only at the end.
    pub eval_every: usize,
    pub flip_prob: f64,
    pub grad_clip: Option<f64>,
    /// Before each evaluation and checkpoint, replace the batch-norm running
    /// averages by training-set statistics gathered with this many samples per forward.
    pub bn_recal_batch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            min_lr: 1e-6,
            epochs: 105,
            schedule_epochs: None,
            batch_size: 8,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            crop_size: None,
            eval_every: 0,
            flip_prob: 0.5,
            grad_clip: None,
            bn_recal_batch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.min_lr > 0.0 && self.min_lr <= self.base_lr) {
            return bad(format!("need 0 < min_lr <= base_lr, got {} and {}", self.min_lr, self.base_lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad(format!("betas must lie in [0,1), got {:?}", self.betas));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob must lie in [0,1], got {}", self.flip_prob));
        }
        if self.schedule_epochs.is_some_and(|s| s < self.epochs) {
            return bad(format!("schedule_epochs must be >= epochs ({}), got {:?}", self.epochs, self.schedule_epochs));
        }
        if self.bn_recal_batch == Some(0) {
            return bad("bn_recal_batch must be >= 1".into());
        }
        if let Some(c) = self.crop_size {
            if c == 0 || c % DOWNSAMPLE != 0 {
                return bad(format!("crop_size must be a positive multiple of {DOWNSAMPLE}, got {c}"));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossTerms,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "epoch,step,lr,loss_total,loss_ce,loss_dice,loss_boundary";

    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.step, self.lr, l.total, l.ce, l.dice, l.boundary
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub evals: Vec<(usize, MetricReport)>,
    pub checkpoints: Vec<PathBuf>,
}

/// Steps per epoch for `n` samples.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Sample order and augmentation draws for one epoch depend only on `(seed, epoch)`.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Pad to a multiple of the network stride, crop, flip, then pad the batch to a common size.
pub fn prepare_batch(samples: &[&SegSample], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let mut items = Vec::with_capacity(samples.len());
    for s in samples {
        let mut s = pad_to_multiple(s, DOWNSAMPLE)?;
        if let Some(c) = cfg.crop_size {
            s = pad_to(&s, s.height().max(c), s.width().max(c))?;
            s = random_crop(&s, c, rng)?;
        }
        items.push(flip_augment(&s, rng, cfg.flip_prob));
    }
    let h = items.iter().map(|s| s.height()).max().unwrap_or(0);
    let w = items.iter().map(|s| s.width()).max().unwrap_or(0);
    let items: Vec<SegSample> = items.iter().map(|s| pad_to(s, h, w)).collect::<Result<_>>()?;
    collate(&items)
}

struct CsvLog(Option<BufWriter<File>>);

impl CsvLog {
    fn create(out: Option<&Path>, name: &str, header: &str) -> Result<Self> {
        let Some(dir) = out else { return Ok(CsvLog(None)) };
        let path = dir.join(name);
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
        Ok(CsvLog(Some(w)))
    }

    fn line(&mut self, s: &str) -> Result<()> {
        if let Some(w) = self.0.as_mut() {
            writeln!(w, "{s}").and_then(|_| w.flush()).map_err(|e| Error::io("log", e))?;
        }
        Ok(())
    }
}

/// Train `model` in place. With `out`, writes the step log, the eval log and
/// checkpoints there. A non-finite loss stops training with an error; the
/// checkpoints already written are left untouched.
pub fn train<T: Scalar>(
    model: &mut BuildFormer<T>,
    data: &[SegSample],
    val: Option<&[SegSample]>,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut step_log = CsvLog::create(out, TRAIN_LOG, LogRow::CSV_HEADER)?;
    let mut eval_log = CsvLog::create(out, EVAL_LOG, &format!("epoch,{}", MetricReport::CSV_HEADER))?;
    let mut opt = AdamW::<T>::new(cfg.optimizer());
    let per_epoch = steps_per_epoch(data.len(), cfg.batch_size);
    let total = cfg.schedule_epochs.unwrap_or(cfg.epochs) * per_epoch;
    let mut report = TrainReport::default();
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SegSample> = chunk.iter().map(|&i| &data[i]).collect();
            let (img, mask, valid) = prepare_batch(&batch, cfg, &mut rng)?;
            let lr = cosine_lr(step, total, cfg.base_lr, cfg.min_lr);
            let loss = train_step(model, &mut opt, &img.cast(), &mask.cast(), &valid.cast(), lr, cfg.grad_clip)
                .map_err(|e| match e {
                    Error::NonFinite { context, index } => Error::NonFinite {
                        context: format!(
                            "{context} at epoch {epoch} step {step}; last good checkpoint: {}",
                            report.checkpoints.last().map_or("none".into(), |p| p.display().to_string())
                        ),
                        index,
                    },
                    e => e,
                })?;
            let row = LogRow { epoch, step, lr, loss };
            step_log.line(&row.csv_row())?;
            report.log.push(row);
            epoch_loss += loss.total;
            step += 1;
        }
        let mean = epoch_loss / per_epoch as f64;
        report.epoch_losses.push(mean);
        log::info!("epoch {epoch}/{} loss {mean:.5}", cfg.epochs);

        let at_eval = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        if at_eval {
            if let Some(b) = cfg.bn_recal_batch {
                recalibrate_batchnorm(model, data, b)?;
            }
            if let Some(val) = val {
                let m = evaluate(model, val, false, DEFAULT_THRESHOLD)?;
                log::info!("epoch {epoch} val {m}");
                eval_log.line(&format!("{epoch},{}", m.csv_row("val")))?;
                report.evals.push((epoch, m));
            }
            if let Some(dir) = out {
                let mut ck = Checkpoint::from_model(model, epoch, cfg.seed);
                ck.meta.insert("train.step".into(), step.to_string());
                let path = dir.join(format!("epoch_{epoch:04}.bfck"));
                ck.save(&path)?;
                ck.save(dir.join(LAST_CHECKPOINT))?;
                report.checkpoints.push(path);
            }
        }
    }
    Ok(report)
}

/// Set every batch-norm running mean and variance to the pooled statistics of
/// `data` (padded, unaugmented), forwarding `batch_size` samples at a time in
/// training mode. Parameters are unchanged.
pub fn recalibrate_batchnorm<T: Scalar>(model: &mut BuildFormer<T>, data: &[SegSample], batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let plain = TrainConfig {
        crop_size: None,
        flip_prob: 0.0,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut updates = Vec::new();
    for chunk in data.chunks(batch_size) {
        let batch: Vec<&SegSample> = chunk.iter().collect();
        let (img, _, _) = prepare_batch(&batch, &plain, &mut rng)?;
        let tape = Tape::no_grad();
        let f = Forward::new(&tape, &model.store, Mode::Train, false);
        model.forward(&f, tape.constant(img.cast()))?;
        updates.extend(f.take_updates());
    }
    model.store.set_pooled_stats(&updates);
    Ok(())
}

/// Forward, joint loss, backward, AdamW update and batch-norm statistics update.
pub fn train_step<T: Scalar>(
    model: &mut BuildFormer<T>,
    opt: &mut AdamW<T>,
    img: &Tensor<T>,
    mask: &Tensor<T>,
    valid: &Tensor<T>,
    lr: f64,
    grad_clip: Option<f64>,
) -> Result<LossTerms> {
    let tape = Tape::new();
    let f = Forward::new(&tape, &model.store, Mode::Train, true);
    let x = tape.constant(img.clone());
    let logits = model.forward(&f, x)?;
    let loss = joint_loss(&tape, logits, mask, valid)?;
    if !loss.terms.total.is_finite() {
        return Err(Error::NonFinite {
            context: format!(
                "loss (ce {}, dice {}, boundary {})",
                loss.terms.ce, loss.terms.dice, loss.terms.boundary
            ),
            index: 0,
        });
    }
    let mut grads = tape.backward(loss.var)?;
    let mut g: Vec<Tensor<T>> = f
        .vars()
        .iter()
        .zip(model.store.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
        .collect();
    let updates = f.take_updates();
    drop(f);
    if let Some(max) = grad_clip {
        clip_grad_norm(&mut g, max);
    }
    opt.step(model.store.params_mut(), &g, lr)?;
    model.store.update_running_stats(&updates);
    Ok(loss.terms)
}

/// Pool confusion counts of `probs_fn` over the valid pixels of each sample,
/// after padding it to a multiple of the network stride. `probs_fn` returns a
/// `[1,H,W]` probability map for one padded sample.
pub fn evaluate_with(
    mut probs_fn: impl FnMut(&SegSample) -> Result<Tensor<f32>>,
    samples: &[SegSample],
    threshold: f64,
) -> Result<MetricReport> {
    let mut counts = ConfusionCounts::default();
    for s in samples {
        let p = pad_to_multiple(s, DOWNSAMPLE)?;
        let probs = probs_fn(&p)?;
        counts.merge(&ConfusionCounts::from_maps(&probs, &p.mask, &p.valid, threshold)?);
    }
    Ok(MetricReport::from_counts(&counts))
}

/// Probability map `[1,H,W]` of one sample, optionally averaged over all flips.
pub fn predict_probs<T: Scalar>(model: &BuildFormer<T>, image: &Tensor<f32>, tta: bool) -> Result<Tensor<f32>> {
    let (h, w) = (image.dim(1), image.dim(2));
    let x: Tensor<T> = image.cast::<T>().reshape(&[1, 3, h, w])?;
    let probs = if tta {
        tta_predict(|x| model.predict(x), &x, &Flip::ALL)?
    } else {
        model.predict(&x)?.map(sigmoid_scalar)
    };
    probs.cast::<f32>().reshape(&[1, h, w])
}

pub fn evaluate<T: Scalar>(model: &BuildFormer<T>, samples: &[SegSample], tta: bool, threshold: f64) -> Result<MetricReport> {
    evaluate_with(|s| predict_probs(model, &s.image, tta), samples, threshold)
}

/// Evaluate a checkpoint that must match `config`.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, config: &ModelConfig, samples: &[SegSample], tta: bool) -> Result<MetricReport> {
    let mut model = BuildFormer::<f32>::new(config.clone(), 0)?;
    ckpt.load_into(&mut model)?;
    evaluate(&model, samples, tta, DEFAULT_THRESHOLD)
}

/// Continue training from a checkpoint with a fresh optimizer at `FINE_TUNE_LR`
/// (unless `cfg.base_lr` is already lower).
pub fn fine_tune(
    ckpt: &Checkpoint,
    data: &[SegSample],
    val: Option<&[SegSample]>,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<(BuildFormer<f32>, TrainReport)> {
    let mut model = ckpt.to_model::<f32>()?;
    let cfg = TrainConfig {
        base_lr: cfg.base_lr.min(FINE_TUNE_LR),
        min_lr: cfg.min_lr.min(FINE_TUNE_LR),
        ..cfg.clone()
    };
    let report = train(&mut model, data, val, &cfg, out)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthParams};

    fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::toy();
        c.stage_depths = [1, 1, 1, 1];
        c
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { min_lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { min_lr: 1e-2, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { crop_size: Some(48), ..Default::default() }.validate().is_err());
        assert!(TrainConfig { bn_recal_batch: Some(0), ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 5, schedule_epochs: Some(4), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn recalibration_pools_statistics_and_keeps_weights() {
        let data = synth_generate(5, 4, 32, &SynthParams::default()).unwrap();
        let mut model = BuildFormer::<f64>::new(tiny_config(), 2).unwrap();
        let weights = model.store.tensors();

        // one forward over all samples gives the target statistics directly
        let refs: Vec<&SegSample> = data.iter().collect();
        let (img, _, _) = prepare_batch(&refs, &TrainConfig { flip_prob: 0.0, ..quick(1) }, &mut epoch_rng(0, 0)).unwrap();
        let tape = Tape::no_grad();
        let f = Forward::new(&tape, &model.store, Mode::Train, false);
        model.forward(&f, tape.constant(img.cast())).unwrap();
        let ups = f.take_updates();
        drop(f);

        recalibrate_batchnorm(&mut model, &data, 4).unwrap();
        assert_eq!(model.store.tensors(), weights);
        for u in &ups {
            for (got, want) in [(model.store.buffer(u.mean), &u.stats.mean), (model.store.buffer(u.var), &u.stats.var)] {
                for (g, w) in got.data().iter().zip(want) {
                    assert!((g - w).abs() < 1e-9 * (1.0 + w.abs()), "{g} vs {w}");
                }
            }
        }
        assert!(recalibrate_batchnorm(&mut model, &data, 0).is_err());
    }

    #[test]
    fn batches_are_padded_to_common_stride_multiple() {
        let a = synth_generate(1, 1, 40, &SynthParams::default()).unwrap().remove(0);
        let b = synth_generate(1, 1, 24, &SynthParams { side: (4, 8), ..Default::default() }).unwrap().remove(0);
        let mut rng = epoch_rng(0, 1);
        let (img, mask, valid) = prepare_batch(&[&a, &b], &quick(1), &mut rng).unwrap();
        assert_eq!(img.shape(), &[2, 3, 64, 64]);
        assert_eq!(mask.shape(), &[2, 1, 64, 64]);
        assert_eq!(valid.sum(), (40 * 40 + 24 * 24) as f32);
    }

    #[test]
    fn smoke_one_epoch_writes_loadable_checkpoint_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_generate(2, 4, 32, &SynthParams::default()).unwrap();
        let mut model = BuildFormer::<f32>::new(tiny_config(), 3).unwrap();
        let rep = train(&mut model, &data, Some(&data[..2]), &quick(1), Some(dir.path())).unwrap();
        assert_eq!(rep.log.len(), 2);
        assert_eq!(rep.log[0].lr, 1e-3);
        let ck = Checkpoint::load(dir.path().join(LAST_CHECKPOINT)).unwrap();
        let back = ck.to_model::<f32>().unwrap();
        let x = data[0].image.clone().reshape(&[1, 3, 32, 32]).unwrap();
        assert_eq!(back.predict(&x).unwrap(), model.predict(&x).unwrap());
        let text = fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
        assert_eq!(text.lines().next(), Some(LogRow::CSV_HEADER));
        assert_eq!(text.lines().count(), 3);
        assert_eq!(rep.evals.len(), 1);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let data = synth_generate(4, 4, 32, &SynthParams::default()).unwrap();
        let run = || {
            let mut m = BuildFormer::<f32>::new(tiny_config(), 1).unwrap();
            let r = train(&mut m, &data, None, &quick(2), None).unwrap();
            (r.log, m.store.tensors())
        };
        let (la, pa) = run();
        let (lb, pb) = run();
        let csv = |l: &[LogRow]| l.iter().map(|r| r.csv_row()).collect::<Vec<_>>();
        assert_eq!(csv(&la), csv(&lb));
        assert_eq!(pa, pb);
        let per = steps_per_epoch(4, 2);
        for r in &la {
            assert_eq!(r.lr, cosine_lr(r.step, 2 * per, 1e-3, 1e-6));
        }
    }

    #[test]
    fn partial_run_follows_the_longer_schedule() {
        let data = synth_generate(4, 4, 32, &SynthParams::default()).unwrap();
        let run = |cfg: TrainConfig| {
            let mut m = BuildFormer::<f32>::new(tiny_config(), 1).unwrap();
            train(&mut m, &data, None, &cfg, None).unwrap().log
        };
        let full = run(quick(3));
        let head = run(TrainConfig { schedule_epochs: Some(3), ..quick(1) });
        let csv = |l: &[LogRow]| l.iter().map(|r| r.csv_row()).collect::<Vec<_>>();
        assert_eq!(csv(&head), csv(&full[..head.len()]));
    }

    #[test]
    fn oracle_predictor_scores_perfectly() {
        let data = synth_generate(6, 3, 40, &SynthParams::default()).unwrap();
        let m = evaluate_with(|s| Ok(s.mask.clone()), &data, 0.5).unwrap();
        assert_eq!((m.iou, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn checkpoint_config_mismatch_is_named() {
        let model = BuildFormer::<f32>::new(tiny_config(), 0).unwrap();
        let ck = Checkpoint::from_model(&model, 0, 0);
        let mut other = tiny_config();
        other.window_side = 8;
        match evaluate_checkpoint(&ck, &other, &[], false) {
            Err(Error::CheckpointMismatch { field, .. }) => assert_eq!(field, "model.window_side"),
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_tta_is_bounded() {
        let data = synth_generate(7, 2, 32, &SynthParams::default()).unwrap();
        let model = BuildFormer::<f32>::new(tiny_config(), 5).unwrap();
        let a = evaluate(&model, &data, false, 0.5).unwrap();
        assert_eq!(a, evaluate(&model, &data, false, 0.5).unwrap());
        let t = evaluate(&model, &data, true, 0.5).unwrap();
        assert!((0.0..=1.0).contains(&t.iou) && (t.iou - a.iou).abs() <= 1.0);
    }
}
