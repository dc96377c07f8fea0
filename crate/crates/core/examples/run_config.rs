//! Parse a flat run config with overrides and print the effective values.

use winlin::config::RunConfig;

fn main() -> winlin::Result<()> {
    let text = "# toy run\nmodel.preset=toy\ntrain.epochs=50\ntrain.grad_clip=1\n";
    let overrides = vec!["model.window_side=8".to_string()];
    let cfg = RunConfig::parse(text, &overrides, std::env::var("WINLIN_SEED").ok().and_then(|s| s.parse().ok()))?;
    print!("{}", cfg.to_text());
    match RunConfig::parse("model.stage_channels=[95,190,380,760]", &[], None) {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => println!("unexpectedly accepted"),
    }
    Ok(())
}
