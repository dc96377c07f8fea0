//! Train the toy network on synthetic tiles, evaluate with and without flip
//! TTA, then reload the checkpoint and fine-tune it.

use winlin::data::{synth_generate, SynthParams};
use winlin::model::{BuildFormer, Checkpoint, ModelConfig};
use winlin::train::{evaluate, fine_tune, train, TrainConfig, LAST_CHECKPOINT};

fn main() -> winlin::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let out = std::env::temp_dir().join("winlin_train_toy");
    let p = SynthParams::default();
    let train_set = synth_generate(1, 16, 64, &p)?;
    let val_set = synth_generate(2, 8, 64, &p)?;

    let mut model = BuildFormer::<f32>::new(ModelConfig::toy(), 0)?;
    println!("{} parameters", model.num_parameters());
    let cfg = TrainConfig {
        epochs,
        batch_size: 1,
        base_lr: 5e-4,
        flip_prob: 0.0,
        grad_clip: Some(1.0),
        bn_recal_batch: Some(16),
        eval_every: 5,
        ..Default::default()
    };
    let report = train(&mut model, &train_set, Some(&val_set), &cfg, Some(&out))?;
    for (epoch, m) in &report.evals {
        println!("epoch {epoch:>3}  loss {:.4}  val {m}", report.epoch_losses[epoch - 1]);
    }
    println!("val without TTA: {}", evaluate(&model, &val_set, false, 0.5)?);
    println!("val with TTA:    {}", evaluate(&model, &val_set, true, 0.5)?);

    let ck = Checkpoint::load(out.join(LAST_CHECKPOINT))?;
    let ft_cfg = TrainConfig { epochs: 2, ..cfg };
    let (tuned, _) = fine_tune(&ck, &train_set, None, &ft_cfg, None)?;
    println!("after fine-tuning: {}", evaluate(&tuned, &val_set, false, 0.5)?);
    Ok(())
}
