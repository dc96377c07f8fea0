//! Build the network, inspect per-stage shapes, predict, and round-trip a checkpoint.

use winlin::autodiff::Tape;
use winlin::model::{BuildFormer, Checkpoint, Forward, Mode, ModelConfig};
use winlin::Tensor;

fn main() -> winlin::Result<()> {
    let preset = std::env::args().nth(1).unwrap_or_else(|| "toy".into());
    let model = BuildFormer::<f32>::new(ModelConfig::preset(&preset)?, 0)?;
    println!("{preset}: {} parameters", model.num_parameters());

    let img = Tensor::<f32>::from_fn(&[1, 3, 64, 64], |i| ((i * 31) % 255) as f32 / 255.0);
    let tape = Tape::no_grad();
    let f = Forward::new(&tape, &model.store, Mode::Eval, false);
    let x = tape.constant(img.clone());
    for (i, s) in model.gcp_forward(&f, x)?.iter().enumerate() {
        println!("stage {} {:?}", i + 1, tape.shape(*s));
    }
    println!("spatial path {:?}", tape.shape(model.scp_forward(&f, x)?));

    let logits = model.predict(&img)?;
    println!("logits {:?}", logits.shape());
    match model.predict(&Tensor::zeros(&[1, 3, 60, 64])) {
        Err(e) => println!("60x64 input: {e}"),
        Ok(_) => println!("60x64 input accepted"),
    }

    let path = std::env::temp_dir().join("winlin_model_forward.bfck");
    Checkpoint::from_model(&model, 0, 0).save(&path)?;
    let back = Checkpoint::load(&path)?.to_model::<f32>()?;
    println!("reloaded logits identical: {}", back.predict(&img)? == logits);
    Ok(())
}
