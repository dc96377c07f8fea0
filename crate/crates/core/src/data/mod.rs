//! Samples, the padding/cropping/flipping protocol, image files, datasets on
//! disk, and a synthetic tile generator.

mod dataset;
mod io;
mod sample;
mod synth;

pub use dataset::{load_dataset, write_split, DatasetManifest, ImageFormat, MANIFEST, MASK_THRESHOLD};
pub use io::{decode_netpbm, encode_netpbm, read_raster, write_raster, Raster};
pub use sample::{collate, crop_window, flip_augment, pad_to, pad_to_multiple, random_crop, SegSample};
pub use synth::{synth_generate, synth_sample, SynthParams};
