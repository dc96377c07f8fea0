//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BFCK"                     magic, 4 bytes
//! u32                        format version
//! u32 n, n bytes             UTF-8 header, one `key=value` per line
//! u32                        number of tensor blocks
//! per block:
//!   u32 n, n bytes           UTF-8 name
//!   u32 rank, rank x u32     shape
//!   numel x f32              data, row-major
//! ```
//!
//! The header holds the model config under `model.*`, plus `epoch`, `seed`
//! and any extra metadata. Blocks hold parameters and batch-norm buffers.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::net::BuildFormer;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"BFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub epoch: usize,
    pub seed: u64,
    /// Extra header entries, e.g. optimizer step count.
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Snapshot of parameters and buffers.
    pub fn from_model<T: Scalar>(model: &BuildFormer<T>, epoch: usize, seed: u64) -> Self {
        let mut tensors = Vec::new();
        for p in model.store.params() {
            tensors.push((p.name.clone(), p.tensor.cast()));
        }
        for b in model.store.buffers() {
            tensors.push((b.name.clone(), b.tensor.cast()));
        }
        Checkpoint {
            config: model.config.clone(),
            epoch,
            seed,
            meta: BTreeMap::new(),
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Build a model from the stored config and load every tensor into it.
    pub fn to_model<T: Scalar>(&self) -> Result<BuildFormer<T>> {
        let mut model = BuildFormer::new(self.config.clone(), 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copy tensors into `model`, which must have the same config.
    pub fn load_into<T: Scalar>(&self, model: &mut BuildFormer<T>) -> Result<()> {
        for ((key, found), (_, expected)) in self.config.pairs().into_iter().zip(model.config.pairs()) {
            if found != expected {
                return Err(Error::CheckpointMismatch {
                    field: format!("model.{key}"),
                    found,
                    expected,
                });
            }
        }
        let lookup = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let t = self.tensor(name).ok_or_else(|| Error::CheckpointMismatch {
                field: name.to_string(),
                found: "missing".into(),
                expected: format!("{shape:?}"),
            })?;
            if t.shape() != shape {
                return Err(Error::CheckpointMismatch {
                    field: name.to_string(),
                    found: format!("{:?}", t.shape()),
                    expected: format!("{shape:?}"),
                });
            }
            Ok(t.cast())
        };
        for p in model.store.params_mut() {
            p.tensor = lookup(&p.name, p.tensor.shape())?;
        }
        for b in model.store.buffers_mut() {
            b.tensor = lookup(&b.name, b.tensor.shape())?;
        }
        Ok(())
    }

    fn header(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.config.pairs() {
            s.push_str(&format!("model.{k}={v}\n"));
        }
        s.push_str(&format!("epoch={}\nseed={}\n", self.epoch, self.seed));
        for (k, v) in &self.meta {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = self.header();
        put_str(&mut out, &header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            what: "checkpoint",
            path: path.to_path_buf(),
            reason,
        };
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = get_u32(&mut r).ok_or_else(|| bad("truncated version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointMismatch {
                field: "format_version".into(),
                found: version.to_string(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        let header = get_str(&mut r).ok_or_else(|| bad("truncated header".into()))?;
        let mut config = ModelConfig::default();
        let (mut epoch, mut seed) = (None, None);
        let mut meta = BTreeMap::new();
        for line in header.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("header line `{line}`")))?;
            if let Some(mk) = k.strip_prefix("model.") {
                config.set(mk, v).map_err(|e| bad(e.to_string()))?;
            } else if k == "epoch" {
                epoch = Some(v.parse().map_err(|_| bad(format!("epoch `{v}`")))?);
            } else if k == "seed" {
                seed = Some(v.parse().map_err(|_| bad(format!("seed `{v}`")))?);
            } else {
                meta.insert(k.to_string(), v.to_string());
            }
        }
        let n = get_u32(&mut r).ok_or_else(|| bad("truncated block count".into()))?;
        let mut tensors = Vec::with_capacity(n as usize);
        for i in 0..n {
            let trunc = || bad(format!("truncated block {i}"));
            let name = get_str(&mut r).ok_or_else(trunc)?;
            let rank = get_u32(&mut r).ok_or_else(trunc)? as usize;
            let shape = (0..rank)
                .map(|_| get_u32(&mut r).map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(trunc)?;
            let numel: usize = shape.iter().product();
            if r.len() < numel * 4 {
                return Err(trunc());
            }
            let (data, rest) = r.split_at(numel * 4);
            r = rest;
            let data = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if !r.is_empty() {
            return Err(bad(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint {
            config,
            epoch: epoch.ok_or_else(|| bad("missing epoch".into()))?,
            seed: seed.ok_or_else(|| bad("missing seed".into()))?,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_u32(r: &mut &[u8]) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Option<String> {
    let n = get_u32(r)? as usize;
    if r.len() < n {
        return None;
    }
    let (s, rest) = r.split_at(n);
    *r = rest;
    String::from_utf8(s.to_vec()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_and_bit_identical_logits() {
        let model = BuildFormer::<f32>::new(ModelConfig::toy(), 7).unwrap();
        let mut ck = Checkpoint::from_model(&model, 3, 99);
        ck.meta.insert("adam.step".into(), "12".into());
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"BFCK");
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        let restored: BuildFormer<f32> = back.to_model().unwrap();
        let img = Tensor::from_fn(&[1, 3, 32, 32], |i| (i % 13) as f32 / 13.0);
        assert_eq!(model.predict(&img).unwrap(), restored.predict(&img).unwrap());
    }

    #[test]
    fn config_mismatch_names_the_field() {
        let model = BuildFormer::<f32>::new(ModelConfig::toy(), 1).unwrap();
        let ck = Checkpoint::from_model(&model, 0, 0);
        let mut cfg = ModelConfig::toy();
        cfg.window_side = 8;
        let mut other = BuildFormer::<f32>::new(cfg, 1).unwrap();
        match ck.load_into(&mut other) {
            Err(Error::CheckpointMismatch { field, .. }) => assert_eq!(field, "model.window_side"),
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn corrupt_bytes_are_format_errors() {
        let model = BuildFormer::<f32>::new(ModelConfig::toy(), 1).unwrap();
        let bytes = Checkpoint::from_model(&model, 0, 0).to_bytes();
        let p = Path::new("x.bfck");
        assert!(matches!(Checkpoint::from_bytes(&bytes[..100], p), Err(Error::Format { .. })));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&wrong, p), Err(Error::Format { .. })));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2, p), Err(Error::CheckpointMismatch { .. })));
    }
}
