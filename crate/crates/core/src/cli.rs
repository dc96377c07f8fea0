//! The subcommands behind the `winlin` binary. Each writes its artifacts and
//! the effective config into an output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bench::{bench_sweep, to_csv};
use crate::config::RunConfig;
use crate::data::{load_dataset, read_raster, synth_generate, write_raster, write_split, DatasetManifest, ImageFormat, Raster, SegSample, SynthParams};
use crate::error::{Error, Result};
use crate::gradcheck::{model_gradcheck, op_suite, NONLINEAR_TOL};
use crate::metrics::MetricReport;
use crate::model::{BuildFormer, Checkpoint};
use crate::train::{evaluate, fine_tune, predict_probs, train};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BENCH_FILE: &str = "bench.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.echo(out)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn image_format(cfg: &RunConfig) -> ImageFormat {
    if cfg.data.format == "png" {
        ImageFormat::Png
    } else {
        ImageFormat::NetPbm
    }
}

/// Synthetic train/val/test splits under `out`. Each split draws from its own seed.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<DatasetManifest>> {
    prepare_out(cfg, out)?;
    let d = &cfg.data;
    let params = SynthParams::default();
    let mut manifests = Vec::new();
    for (i, (split, n)) in [("train", d.train_count), ("val", d.val_count), ("test", d.test_count)].into_iter().enumerate() {
        let samples = synth_generate(d.seed.wrapping_mul(3).wrapping_add(i as u64), n, d.tile_size, &params)?;
        manifests.push(write_split(out, split, &samples, image_format(cfg))?);
    }
    Ok(manifests)
}

pub fn load_split(root: &Path, split: &str) -> Result<Vec<SegSample>> {
    let m = DatasetManifest::read(root, split)?;
    load_dataset(&m).collect()
}

/// Train from scratch, or fine-tune when `from` names a checkpoint.
pub fn train_cmd(cfg: &RunConfig, out: &Path, from: Option<&Path>) -> Result<PathBuf> {
    prepare_out(cfg, out)?;
    let train_set = load_split(&cfg.data.root, "train")?;
    let val_set = if cfg.data.root.join("val").join(crate::data::MANIFEST).exists() {
        Some(load_split(&cfg.data.root, "val")?)
    } else {
        None
    };
    let report = match from {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut expected = BuildFormer::<f32>::new(cfg.model.clone(), 0)?;
            ck.load_into(&mut expected)?;
            fine_tune(&ck, &train_set, val_set.as_deref(), &cfg.train, Some(out))?.1
        }
        None => {
            let mut model = BuildFormer::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
            train(&mut model, &train_set, val_set.as_deref(), &cfg.train, Some(out))?
        }
    };
    report
        .checkpoints
        .last()
        .cloned()
        .ok_or_else(|| Error::Precondition("training wrote no checkpoint".into()))
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<BuildFormer<f32>> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut model = BuildFormer::<f32>::new(cfg.model.clone(), 0)?;
    ck.load_into(&mut model)?;
    Ok(model)
}

/// Metrics on `eval.split`, without and (if enabled) with flip TTA.
pub fn eval_cmd(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<Vec<(String, MetricReport)>> {
    prepare_out(cfg, out)?;
    let model = load_model(cfg, checkpoint)?;
    let samples = load_split(&cfg.data.root, &cfg.eval.split)?;
    let mut rows = vec![(cfg.eval.split.clone(), evaluate(&model, &samples, false, cfg.eval.threshold)?)];
    if cfg.eval.tta {
        rows.push((format!("{}_tta", cfg.eval.split), evaluate(&model, &samples, true, cfg.eval.threshold)?));
    }
    let mut text = format!("{}\n", MetricReport::CSV_HEADER);
    for (split, m) in &rows {
        let _ = writeln!(text, "{}", m.csv_row(split));
    }
    write_text(&out.join(METRICS_FILE), &text)?;
    Ok(rows)
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "pgm" | "png"))
}

/// Binary masks (0/255) for every image in `input`, written under `out` with the same stem.
pub fn predict_cmd(cfg: &RunConfig, out: &Path, checkpoint: &Path, input: &Path, tta: bool) -> Result<Vec<PathBuf>> {
    prepare_out(cfg, out)?;
    let model = load_model(cfg, checkpoint)?;
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_image(p))
        .collect();
    files.sort();
    let ext = if cfg.data.format == "png" { "png" } else { "pgm" };
    let mut written = Vec::new();
    for f in files {
        let img = read_raster(&f, 3)?;
        let (h, w) = (img.height, img.width);
        let sample = SegSample::new("p", img.to_tensor(), crate::tensor::Tensor::zeros(&[1, h, w]))?;
        let padded = crate::data::pad_to_multiple(&sample, crate::model::DOWNSAMPLE)?;
        let probs = predict_probs(&model, &padded.image, tta)?;
        let pw = padded.width();
        let mut pixels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let on = probs.data()[y * pw + x] as f64 >= cfg.eval.threshold;
                pixels.push(if on { 255 } else { 0 });
            }
        }
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let path = out.join(format!("{stem}.{ext}"));
        write_raster(&path, &Raster { width: w, height: h, channels: 1, pixels })?;
        written.push(path);
    }
    Ok(written)
}

pub fn bench_cmd(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    prepare_out(cfg, out)?;
    let rows = bench_sweep(&cfg.bench)?;
    let path = out.join(BENCH_FILE);
    write_text(&path, &to_csv(&rows))?;
    Ok(path)
}

/// Run the op suite for `seeds` seeds, plus the configured model at 32x32 when
/// `model` gives the number of elements to sample per parameter tensor.
/// Returns whether everything passed.
pub fn gradcheck_cmd(cfg: &RunConfig, out: &Path, seeds: u64, model: Option<usize>) -> Result<bool> {
    prepare_out(cfg, out)?;
    let mut text = String::from("op,seed,max_rel_error,tolerance,checked,status\n");
    let mut all = true;
    let mut row = |name: &str, seed: u64, err: f64, tol: f64, checked: usize| {
        let ok = err < tol;
        all &= ok;
        let _ = writeln!(text, "{name},{seed},{err:e},{tol:e},{checked},{}", if ok { "pass" } else { "FAIL" });
    };
    for seed in 0..seeds {
        for c in op_suite(seed)? {
            row(c.name, seed, c.report.max_rel_error, c.tolerance, c.report.checked);
        }
        if let Some(per) = model {
            let r = model_gradcheck(&cfg.model, seed, 32, per)?;
            row("model", seed, r.max_rel_error, NONLINEAR_TOL, r.checked);
        }
    }
    write_text(&out.join(GRADCHECK_FILE), &text)?;
    Ok(all)
}

