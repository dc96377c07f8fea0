//! Flat `key=value` run configuration with namespaced keys.
//!
//! ```text
//! # comment
//! model.preset=toy
//! model.window_side=4
//! train.epochs=300
//! data.root=runs/data
//! bench.windows=[8,16,32,64]
//! ```
//!
//! Values are applied in order: defaults, then the file, then command-line
//! overrides. `model.preset` is applied before any other model key from the
//! same source. Seeds that are not set anywhere fall back to `WINLIN_SEED`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::model::{format_array, parse_list, parse_value, ModelConfig};
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "WINLIN_SEED";
pub const ECHO_FILE: &str = "run_config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub root: PathBuf,
    pub tile_size: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    /// `ppm` (NetPBM) or `png`.
    pub format: String,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            tile_size: 64,
            train_count: 16,
            val_count: 16,
            test_count: 16,
            format: "ppm".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub split: String,
    pub tta: bool,
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: "val".into(),
            tta: true,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model_preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model_preset: "default".into(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// `(line number, key, value)`; line 0 marks a command-line override.
type Entry = (usize, String, String);

fn split_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("malformed value `{v}` for `{key}`"))),
    }
}

fn opt_usize(key: &str, v: &str) -> Result<Option<usize>> {
    let n: usize = parse_value(key, v)?;
    Ok((n > 0).then_some(n))
}

fn opt_f64(key: &str, v: &str) -> Result<Option<f64>> {
    let x: f64 = parse_value(key, v)?;
    Ok((x > 0.0).then_some(x))
}

impl RunConfig {
    /// Read `path` (if any), apply `overrides` (`key=value` strings), then
    /// fill unset seeds from `env_seed`, and validate.
    pub fn load(path: Option<&Path>, overrides: &[String], env_seed: Option<u64>) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, overrides, env_seed)
    }

    pub fn parse(text: &str, overrides: &[String], env_seed: Option<u64>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seeded = BTreeSet::new();
        let file = split_entries(text)?;
        let cli = overrides
            .iter()
            .map(|o| {
                o.split_once('=')
                    .map(|(k, v)| (0, k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))
            })
            .collect::<Result<Vec<Entry>>>()?;
        for source in [file, cli] {
            let (presets, rest): (Vec<Entry>, Vec<Entry>) = source.into_iter().partition(|e| e.1 == "model.preset");
            for (line, key, value) in presets.into_iter().chain(rest) {
                cfg.set(&key, &value).map_err(|e| {
                    let msg = match e {
                        Error::Config(m) => m,
                        e => e.to_string(),
                    };
                    if line == 0 {
                        Error::Config(format!("override `{key}`: {msg}"))
                    } else {
                        Error::Config(format!("line {line}: `{key}`: {msg}"))
                    }
                })?;
                if key.ends_with(".seed") {
                    seeded.insert(key);
                }
            }
        }
        if let Some(s) = env_seed {
            for (key, slot) in [
                ("train.seed", &mut cfg.train.seed),
                ("data.seed", &mut cfg.data.seed),
                ("bench.seed", &mut cfg.bench.seed),
            ] {
                if !seeded.contains(key) {
                    *slot = s;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (ns, name) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        let unknown = || Err(Error::Config(format!("unknown key `{key}`")));
        match ns {
            "model" if name == "preset" => {
                self.model = ModelConfig::preset(v)?;
                self.model_preset = v.to_string();
            }
            "model" => self.model.set(name, v).or_else(|_| unknown())?,
            "train" => {
                let t = &mut self.train;
                match name {
                    "base_lr" => t.base_lr = parse_value(key, v)?,
                    "min_lr" => t.min_lr = parse_value(key, v)?,
                    "epochs" => t.epochs = parse_value(key, v)?,
                    "schedule_epochs" => t.schedule_epochs = opt_usize(key, v)?,
                    "batch_size" => t.batch_size = parse_value(key, v)?,
                    "weight_decay" => t.weight_decay = parse_value(key, v)?,
                    "beta1" => t.betas.0 = parse_value(key, v)?,
                    "beta2" => t.betas.1 = parse_value(key, v)?,
                    "eps" => t.eps = parse_value(key, v)?,
                    "seed" => t.seed = parse_value(key, v)?,
                    "crop_size" => t.crop_size = opt_usize(key, v)?,
                    "eval_every" => t.eval_every = parse_value(key, v)?,
                    "flip_prob" => t.flip_prob = parse_value(key, v)?,
                    "grad_clip" => t.grad_clip = opt_f64(key, v)?,
                    "bn_recal_batch" => t.bn_recal_batch = opt_usize(key, v)?,
                    _ => return unknown(),
                }
            }
            "data" => {
                let d = &mut self.data;
                match name {
                    "root" => d.root = PathBuf::from(v),
                    "tile_size" => d.tile_size = parse_value(key, v)?,
                    "train_count" => d.train_count = parse_value(key, v)?,
                    "val_count" => d.val_count = parse_value(key, v)?,
                    "test_count" => d.test_count = parse_value(key, v)?,
                    "format" => d.format = v.to_string(),
                    "seed" => d.seed = parse_value(key, v)?,
                    _ => return unknown(),
                }
            }
            "eval" => match name {
                "split" => self.eval.split = v.to_string(),
                "tta" => self.eval.tta = parse_bool(key, v)?,
                "threshold" => self.eval.threshold = parse_value(key, v)?,
                _ => return unknown(),
            },
            "bench" => {
                let b = &mut self.bench;
                match name {
                    "dims" => {
                        let d: Vec<usize> = parse_list(key, v)?;
                        let [h, w, dim, heads] = d[..] else {
                            return Err(Error::Config(format!("`{key}` expects [height,width,dim,heads]")));
                        };
                        (b.height, b.width, b.dim, b.heads) = (h, w, dim, heads);
                    }
                    "windows" => b.windows = parse_list(key, v)?,
                    "repeats" => b.repeats = parse_value(key, v)?,
                    "warmup" => b.warmup = parse_value(key, v)?,
                    "seed" => b.seed = parse_value(key, v)?,
                    "memory_budget_mb" => b.memory_budget_bytes = parse_value::<u64>(key, v)? << 20,
                    _ => return unknown(),
                }
            }
            _ => return unknown(),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !matches!(self.data.format.as_str(), "ppm" | "png") {
            return Err(Error::Config(format!("data.format must be ppm or png, got `{}`", self.data.format)));
        }
        if self.data.tile_size < 16 {
            return Err(Error::Config(format!("data.tile_size must be >= 16, got {}", self.data.tile_size)));
        }
        if !matches!(self.eval.split.as_str(), "train" | "val" | "test") {
            return Err(Error::Config(format!("eval.split must be train, val or test, got `{}`", self.eval.split)));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Config(format!("eval.threshold must be in (0,1), got {}", self.eval.threshold)));
        }
        if self.bench.repeats < 3 {
            return Err(Error::Config(format!("bench.repeats must be >= 3, got {}", self.bench.repeats)));
        }
        if self.bench.windows.is_empty() {
            return Err(Error::Config("bench.windows must not be empty".into()));
        }
        Ok(())
    }

    /// Every effective key, one `key=value` per line, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let (t, d, e, b) = (&self.train, &self.data, &self.eval, &self.bench);
        let mut lines = vec![format!("model.preset={}", self.model_preset)];
        lines.extend(self.model.pairs().into_iter().map(|(k, v)| format!("model.{k}={v}")));
        lines.extend([
            format!("train.base_lr={}", t.base_lr),
            format!("train.min_lr={}", t.min_lr),
            format!("train.epochs={}", t.epochs),
            format!("train.schedule_epochs={}", t.schedule_epochs.unwrap_or(0)),
            format!("train.batch_size={}", t.batch_size),
            format!("train.weight_decay={}", t.weight_decay),
            format!("train.beta1={}", t.betas.0),
            format!("train.beta2={}", t.betas.1),
            format!("train.eps={}", t.eps),
            format!("train.seed={}", t.seed),
            format!("train.crop_size={}", t.crop_size.unwrap_or(0)),
            format!("train.eval_every={}", t.eval_every),
            format!("train.flip_prob={}", t.flip_prob),
            format!("train.grad_clip={}", t.grad_clip.unwrap_or(0.0)),
            format!("train.bn_recal_batch={}", t.bn_recal_batch.unwrap_or(0)),
            format!("data.root={}", d.root.display()),
            format!("data.tile_size={}", d.tile_size),
            format!("data.train_count={}", d.train_count),
            format!("data.val_count={}", d.val_count),
            format!("data.test_count={}", d.test_count),
            format!("data.format={}", d.format),
            format!("data.seed={}", d.seed),
            format!("eval.split={}", e.split),
            format!("eval.tta={}", e.tta),
            format!("eval.threshold={}", e.threshold),
            format!("bench.dims=[{},{},{},{}]", b.height, b.width, b.dim, b.heads),
            format!("bench.windows={}", format_array(&b.windows)),
            format!("bench.repeats={}", b.repeats),
            format!("bench.warmup={}", b.warmup),
            format!("bench.seed={}", b.seed),
            format!("bench.memory_budget_mb={}", b.memory_budget_bytes >> 20),
        ]);
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    /// Write the effective config into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ECHO_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ovr(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("", &[], None).unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# only a comment\n\n", &[], None).unwrap(), RunConfig::default());
    }

    #[test]
    fn precedence_and_echo() {
        let text = "model.window_side=8\ntrain.epochs=3\n";
        let c = RunConfig::parse(text, &ovr(&["model.window_side=16"]), None).unwrap();
        assert_eq!(c.model.window_side, 16);
        assert_eq!(c.train.epochs, 3);
        assert!(c.to_text().contains("model.window_side=16\n"));
        assert_eq!(RunConfig::parse(&c.to_text(), &[], None).unwrap(), c);
    }

    #[test]
    fn preset_applies_before_other_model_keys() {
        let c = RunConfig::parse("model.fpn_dim=128\nmodel.preset=toy\n", &[], None).unwrap();
        assert_eq!(c.model.fpn_dim, 128);
        assert_eq!(c.model.window_side, 4);
    }

    #[test]
    fn stage_channels_invariant() {
        let ok = RunConfig::parse("model.stage_channels=[96,192,384,768]", &[], None);
        assert!(ok.is_ok());
        let err = RunConfig::parse("model.stage_channels=[95,190,380,760]", &[], None).unwrap_err();
        assert!(err.to_string().contains("96"), "{err}");
    }

    #[test]
    fn errors_name_key_and_line() {
        let err = RunConfig::parse("train.epochs=2\ntrain.speed=3\n", &[], None).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("train.speed"), "{err}");
        let err = RunConfig::parse("\n\ntrain.base_lr=fast", &[], None).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("train.base_lr"), "{err}");
        let err = RunConfig::parse("", &ovr(&["bench.dims=[1,2]"]), None).unwrap_err().to_string();
        assert!(err.contains("override") && err.contains("bench.dims"), "{err}");
        assert!(RunConfig::parse("nonsense", &[], None).is_err());
        assert!(RunConfig::parse("model.bogus=1", &[], None).is_err());
    }

    #[test]
    fn env_seed_fills_only_unset_seeds() {
        let c = RunConfig::parse("data.seed=3", &[], Some(42)).unwrap();
        assert_eq!((c.data.seed, c.train.seed, c.bench.seed), (3, 42, 42));
    }
}
