//! Generate synthetic tiles, write them as a dataset split and read it back.

use winlin::data::{load_dataset, synth_generate, write_split, DatasetManifest, ImageFormat, SynthParams};

fn main() -> winlin::Result<()> {
    let root = std::env::temp_dir().join("winlin_synthetic_example");
    let samples = synth_generate(3, 8, 64, &SynthParams::default())?;
    for s in &samples {
        println!("{}: {} building pixels of {}", s.id, s.building_pixels(), s.height() * s.width());
    }
    write_split(&root, "train", &samples, ImageFormat::NetPbm)?;
    let manifest = DatasetManifest::read(&root, "train")?;
    let loaded: Vec<_> = load_dataset(&manifest).collect::<winlin::Result<_>>()?;
    println!("wrote {} and read back {} identical samples: {}", manifest.path().display(), loaded.len(), loaded == samples);
    Ok(())
}
