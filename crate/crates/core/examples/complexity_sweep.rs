//! FLOPs, attention-scratch peaks and time of exact vs linear window attention.

use winlin::bench::{bench_sweep, to_csv, BenchConfig};

fn main() -> winlin::Result<()> {
    let cfg = BenchConfig { height: 128, width: 128, windows: vec![4, 8, 16, 32], ..Default::default() };
    print!("{}", to_csv(&bench_sweep(&cfg)?));
    Ok(())
}
