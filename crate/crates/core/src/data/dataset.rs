//! On-disk datasets: `root/<split>/{images,masks}/<id>.<ext>` plus a
//! `root/<split>/manifest.csv` listing `image,mask` paths relative to the split.

use std::fs;
use std::path::{Path, PathBuf};

use super::io::{read_raster, write_raster, Raster};
use super::sample::SegSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.csv";
pub const MASK_THRESHOLD: u8 = 127;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    /// `(image, mask)` paths relative to `root/split`.
    pub pairs: Vec<(PathBuf, PathBuf)>,
}

impl DatasetManifest {
    pub fn split_dir(&self) -> PathBuf {
        self.root.join(&self.split)
    }

    pub fn path(&self) -> PathBuf {
        self.split_dir().join(MANIFEST)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn read(root: impl Into<PathBuf>, split: &str) -> Result<Self> {
        let mut m = DatasetManifest {
            root: root.into(),
            split: split.to_string(),
            pairs: Vec::new(),
        };
        let path = m.path();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (i == 0 && line == "image,mask") {
                continue;
            }
            let (img, mask) = line.split_once(',').ok_or_else(|| Error::Format {
                what: "manifest",
                path: path.clone(),
                reason: format!("line {}: expected `image,mask`", i + 1),
            })?;
            m.pairs.push((PathBuf::from(img.trim()), PathBuf::from(mask.trim())));
        }
        Ok(m)
    }

    pub fn write(&self) -> Result<()> {
        let dir = self.split_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut text = String::from("image,mask\n");
        for (i, m) in &self.pairs {
            text.push_str(&format!("{},{}\n", i.display(), m.display()));
        }
        let path = self.path();
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Load one pair.
    pub fn load(&self, index: usize) -> Result<SegSample> {
        let (img_rel, mask_rel) = &self.pairs[index];
        let (img_path, mask_path) = (self.split_dir().join(img_rel), self.split_dir().join(mask_rel));
        let img = read_raster(&img_path, 3)?;
        let mask = read_raster(&mask_path, 1)?;
        if (img.width, img.height) != (mask.width, mask.height) {
            return Err(Error::Format {
                what: "mask",
                path: mask_path,
                reason: format!(
                    "size {}x{} differs from image {}x{}",
                    mask.width, mask.height, img.width, img.height
                ),
            });
        }
        let id = img_rel
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{index}"));
        let binary = Tensor::new(
            &[1, mask.height, mask.width],
            mask.pixels.iter().map(|&v| (v > MASK_THRESHOLD) as u8 as f32).collect(),
        )?;
        SegSample::new(id, img.to_tensor(), binary)
    }
}

/// Samples of a manifest in manifest order.
pub fn load_dataset(manifest: &DatasetManifest) -> impl Iterator<Item = Result<SegSample>> + '_ {
    (0..manifest.len()).map(move |i| manifest.load(i))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    NetPbm,
    Png,
}

/// Write samples as one split and return its manifest.
pub fn write_split(root: &Path, split: &str, samples: &[SegSample], format: ImageFormat) -> Result<DatasetManifest> {
    let (iext, mext) = match format {
        ImageFormat::NetPbm => ("ppm", "pgm"),
        ImageFormat::Png => ("png", "png"),
    };
    let mut m = DatasetManifest {
        root: root.to_path_buf(),
        split: split.to_string(),
        pairs: Vec::new(),
    };
    let dir = m.split_dir();
    for s in samples {
        let img_rel = PathBuf::from("images").join(format!("{}.{iext}", s.id));
        let mask_rel = PathBuf::from("masks").join(format!("{}.{mext}", s.id));
        write_raster(&dir.join(&img_rel), &Raster::from_tensor(&s.image)?)?;
        write_raster(&dir.join(&mask_rel), &Raster::from_tensor(&s.mask)?)?;
        m.pairs.push((img_rel, mask_rel));
    }
    m.write()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthParams};

    #[test]
    fn synthetic_split_round_trips_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_generate(5, 3, 32, &SynthParams::default()).unwrap();
        for fmt in [ImageFormat::NetPbm, ImageFormat::Png] {
            let m = write_split(dir.path(), "train", &samples, fmt).unwrap();
            let back = DatasetManifest::read(dir.path(), "train").unwrap();
            assert_eq!(back, m);
            let loaded: Vec<SegSample> = load_dataset(&back).collect::<Result<_>>().unwrap();
            assert_eq!(loaded, samples);
        }
    }

    #[test]
    fn mask_binarization_and_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let split = dir.path().join("val");
        let img = Raster { width: 2, height: 1, channels: 3, pixels: vec![0, 0, 0, 255, 255, 255] };
        write_raster(&split.join("images/a.ppm"), &img).unwrap();
        write_raster(&split.join("masks/a.pgm"), &Raster { width: 2, height: 1, channels: 1, pixels: vec![0, 255] }).unwrap();
        write_raster(&split.join("masks/b.pgm"), &Raster { width: 3, height: 1, channels: 1, pixels: vec![0, 128, 127] }).unwrap();
        let m = DatasetManifest {
            root: dir.path().to_path_buf(),
            split: "val".into(),
            pairs: vec![
                ("images/a.ppm".into(), "masks/a.pgm".into()),
                ("images/a.ppm".into(), "masks/b.pgm".into()),
            ],
        };
        assert_eq!(m.load(0).unwrap().mask.data(), &[0.0, 1.0]);
        match m.load(1) {
            Err(Error::Format { path, .. }) => assert!(path.ends_with("masks/b.pgm")),
            r => panic!("{r:?}"),
        }
    }
}
