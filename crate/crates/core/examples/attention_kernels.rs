//! Exact softmax attention, the linear kernel and its quadratic reference on random inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use winlin::attention::{attention_exact, attention_kernelized_oracle, attention_linear};
use winlin::Tensor;

fn main() -> winlin::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    println!("{:>5} {:>4} {:>14} {:>12} {:>12}", "N", "d", "|lin - ref|", "lin ms", "exact ms");
    for (n, d) in [(16, 8), (64, 16), (256, 32), (1024, 32)] {
        let q = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[n, d], 1.0, &mut rng);
        let t = std::time::Instant::now();
        let lin = attention_linear(&q, &k, &v)?;
        let lin_ms = t.elapsed().as_secs_f64() * 1e3;
        let t = std::time::Instant::now();
        attention_exact(&q, &k, &v, (d as f64).sqrt())?;
        let exact_ms = t.elapsed().as_secs_f64() * 1e3;
        let reference = attention_kernelized_oracle(&q, &k, &v)?;
        println!("{n:>5} {d:>4} {:>14.3e} {lin_ms:>12.3} {exact_ms:>12.3}", lin.max_abs_diff(&reference));
    }
    Ok(())
}
