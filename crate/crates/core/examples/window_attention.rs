//! Window partitioning and the windowed attention layer with both cores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use winlin::attention::{w_lmhsa, w_mhsa_baseline, window_partition, window_reverse, AttentionParams};
use winlin::Tensor;

fn main() -> winlin::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::randn(&[2, 32, 13, 18], 1.0, &mut rng);

    let (windows, layout) = window_partition(&x, 4)?;
    println!("13x18 map, window 4: windows {:?}, layout {layout:?}", windows.shape());
    let back = window_reverse(&windows, &layout)?;
    println!("partition then reverse, max diff {:e}", back.max_abs_diff(&x));

    let params = AttentionParams::random(32, 2, &mut rng)?;
    for side in [1, 2, 4, 8] {
        let lin = w_lmhsa(&x, &params, side)?;
        let exact = w_mhsa_baseline(&x, &params, side)?;
        println!("window {side}: |W-LMHSA - W-MHSA| = {:.3e}", lin.max_abs_diff(&exact));
    }
    Ok(())
}
