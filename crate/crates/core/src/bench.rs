//! Analytic FLOP counts and measured time / attention-scratch peaks of the
//! exact and linear window attention cores across window sizes.
//!
//! FLOP convention: a multiply-add is 2 FLOPs and softmax costs 5 per score.
//! Per window of `N = w*w` tokens with head dim `d`, summed over `h` heads:
//!
//! ```text
//! exact : 2N²d (scores) + 5N² (softmax) + 2N²d (aggregate)
//! linear: 3Nd (norms) + 2Nd² (K̂ᵀV) + 2Nd² (Q̂·K̂ᵀV) + 2Nd (denominator) + 2Nd (combine)
//! ```
//!
//! Image totals multiply by `HW/N` windows. The four projections (`8·HW·D²`)
//! are the same for both kernels and are reported separately.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{scratch_len, windowed_attention_forward, AttentionKernel, AttentionParams, BufferMeter};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchKernel {
    Exact,
    Linear,
}

impl BenchKernel {
    pub fn name(self) -> &'static str {
        match self {
            BenchKernel::Exact => "exact",
            BenchKernel::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exact" => Some(BenchKernel::Exact),
            "linear" => Some(BenchKernel::Linear),
            _ => None,
        }
    }

    /// Attention core at head dim `d`, with the usual `sqrt(d)` score scale.
    pub fn attention(self, d: usize) -> AttentionKernel {
        match self {
            BenchKernel::Exact => AttentionKernel::Exact { scale: (d as f64).sqrt() },
            BenchKernel::Linear => AttentionKernel::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopReport {
    pub kernel: BenchKernel,
    pub window_side: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub heads: usize,
    /// Attention-core FLOPs over the whole image.
    pub flops_total: u64,
    pub projection_flops: u64,
    /// Peak bytes of live attention scratch; `None` until measured.
    pub peak_buffer_bytes: Option<u64>,
    /// Median forward time; `None` until measured.
    pub wall_ms: Option<f64>,
    /// The run would exceed the memory budget and was skipped.
    pub oom: bool,
}

fn check_geometry(w: usize, height: usize, width: usize, dim: usize, heads: usize) -> Result<()> {
    if w == 0 || height == 0 || width == 0 || dim == 0 || heads == 0 {
        return Err(Error::Precondition("bench geometry must be positive".into()));
    }
    if dim % heads != 0 {
        return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
    }
    if height % w != 0 || width % w != 0 {
        return Err(Error::Config(format!("window {w} does not tile a {height}x{width} image")));
    }
    Ok(())
}

/// Attention-core FLOPs of one window of `n` tokens over `heads` heads of dim `d`.
pub fn window_flops(kernel: BenchKernel, n: u64, d: u64, heads: u64) -> u64 {
    heads
        * match kernel {
            BenchKernel::Exact => 2 * n * n * d + 5 * n * n + 2 * n * n * d,
            BenchKernel::Linear => 3 * n * d + 2 * n * d * d + 2 * n * d * d + 2 * n * d + 2 * n * d,
        }
}

pub fn count_flops(kernel: BenchKernel, w: usize, height: usize, width: usize, dim: usize, heads: usize) -> Result<FlopReport> {
    check_geometry(w, height, width, dim, heads)?;
    let n = (w * w) as u64;
    let pixels = (height * width) as u64;
    let per_window = window_flops(kernel, n, (dim / heads) as u64, heads as u64);
    Ok(FlopReport {
        kernel,
        window_side: w,
        height,
        width,
        dim,
        heads,
        flops_total: pixels / n * per_window,
        projection_flops: 8 * pixels * (dim * dim) as u64,
        peak_buffer_bytes: None,
        wall_ms: None,
        oom: false,
    })
}

/// Scratch bytes the kernel will hold at once (all heads of one window, f32).
pub fn predicted_peak_bytes(kernel: BenchKernel, w: usize, dim: usize, heads: usize) -> u64 {
    let d = dim / heads;
    (heads * scratch_len(kernel.attention(d), w * w, d) * std::mem::size_of::<f32>()) as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub heads: usize,
    pub windows: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Runs whose predicted attention scratch exceeds this are reported as out of memory.
    pub memory_budget_bytes: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            height: 256,
            width: 256,
            dim: 96,
            heads: 3,
            windows: vec![8, 16, 32, 64],
            repeats: 3,
            warmup: 1,
            seed: 0,
            memory_budget_bytes: 1 << 30,
        }
    }
}

/// Time `cfg.repeats` forward passes of the windowed layer and record the
/// attention-scratch high-water mark.
pub fn measure(kernel: BenchKernel, w: usize, cfg: &BenchConfig) -> Result<FlopReport> {
    if cfg.repeats < 3 {
        return Err(Error::Precondition(format!("need at least 3 repeats, got {}", cfg.repeats)));
    }
    let mut report = count_flops(kernel, w, cfg.height, cfg.width, cfg.dim, cfg.heads)?;
    if predicted_peak_bytes(kernel, w, cfg.dim, cfg.heads) > cfg.memory_budget_bytes {
        report.oom = true;
        return Ok(report);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = AttentionParams::<f32>::random(cfg.dim, cfg.heads, &mut rng)?;
    let x = Tensor::<f32>::randn(&[1, cfg.dim, cfg.height, cfg.width], 1.0, &mut rng);
    let attn = kernel.attention(cfg.dim / cfg.heads);
    for _ in 0..cfg.warmup {
        windowed_attention_forward(&x, &params, w, attn, None)?;
    }
    let mut meter = BufferMeter::default();
    let mut times = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let t = Instant::now();
        std::hint::black_box(windowed_attention_forward(&x, &params, w, attn, Some(&mut meter))?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    report.wall_ms = Some(times[times.len() / 2]);
    report.peak_buffer_bytes = Some(meter.peak() as u64);
    Ok(report)
}

/// Measure both kernels at every window size, exact rows first.
pub fn bench_sweep(cfg: &BenchConfig) -> Result<Vec<FlopReport>> {
    let mut rows = Vec::new();
    for kernel in [BenchKernel::Exact, BenchKernel::Linear] {
        for &w in &cfg.windows {
            let r = measure(kernel, w, cfg)?;
            log::info!(
                "{} w={w}: {} flops, peak {:?} B, {:?} ms",
                kernel.name(),
                r.flops_total,
                r.peak_buffer_bytes,
                r.wall_ms
            );
            rows.push(r);
        }
    }
    Ok(rows)
}

pub const CSV_HEADER: &str = "kernel,window,flops,peak_bytes,wall_ms,ratio";

/// CSV with `#` comment lines describing geometry and convention. `ratio` is
/// the FLOP ratio to the previous window of the same kernel; out-of-memory
/// rows carry `*` for the measured columns.
pub fn to_csv(rows: &[FlopReport]) -> String {
    let mut s = String::new();
    if let Some(r) = rows.first() {
        let _ = writeln!(s, "# image {}x{}, dim {}, heads {}", r.height, r.width, r.dim, r.heads);
    }
    s.push_str("# flops: attention core over the image; multiply-add = 2, softmax = 5 per score\n");
    s.push_str("# exact per window: h(2N^2d + 5N^2 + 2N^2d); linear: h(3Nd + 4Nd^2 + 4Nd); N = window^2, d = dim/heads\n");
    if let Some(r) = rows.first() {
        let _ = writeln!(s, "# projections (excluded, both kernels): {} flops", r.projection_flops);
    }
    s.push_str("# peak_bytes: live attention scratch; * = exceeds the memory budget\n");
    s.push_str(CSV_HEADER);
    s.push('\n');
    for (i, r) in rows.iter().enumerate() {
        let ratio = match i.checked_sub(1).map(|j| &rows[j]) {
            Some(p) if p.kernel == r.kernel => format!("{}", r.flops_total as f64 / p.flops_total as f64),
            _ => String::new(),
        };
        let (peak, wall) = if r.oom {
            ("*".to_string(), "*".to_string())
        } else {
            (
                r.peak_buffer_bytes.map_or(String::new(), |b| b.to_string()),
                r.wall_ms.map_or(String::new(), |t| t.to_string()),
            )
        };
        let _ = writeln!(s, "{},{},{},{peak},{wall},{ratio}", r.kernel.name(), r.window_side, r.flops_total);
    }
    s
}

/// One parsed data row of [`to_csv`] output.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub kernel: BenchKernel,
    pub window: usize,
    pub flops: u64,
    pub peak_bytes: Option<u64>,
    pub wall_ms: Option<f64>,
    pub oom: bool,
    pub ratio: Option<f64>,
}

impl CsvRow {
    pub fn from_report(r: &FlopReport, ratio: Option<f64>) -> Self {
        CsvRow {
            kernel: r.kernel,
            window: r.window_side,
            flops: r.flops_total,
            peak_bytes: if r.oom { None } else { r.peak_buffer_bytes },
            wall_ms: if r.oom { None } else { r.wall_ms },
            oom: r.oom,
            ratio,
        }
    }
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let bad = |line: &str| Error::Config(format!("malformed bench row `{line}`"));
    let mut rows = Vec::new();
    let mut header = false;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        if !header {
            if line != CSV_HEADER {
                return Err(bad(line));
            }
            header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(line));
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() || s == "*" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(line))
            }
        };
        rows.push(CsvRow {
            kernel: BenchKernel::parse(f[0]).ok_or_else(|| bad(line))?,
            window: f[1].parse().map_err(|_| bad(line))?,
            flops: f[2].parse().map_err(|_| bad(line))?,
            peak_bytes: if f[3].is_empty() || f[3] == "*" {
                None
            } else {
                Some(f[3].parse().map_err(|_| bad(line))?)
            },
            wall_ms: opt(f[4])?,
            oom: f[3] == "*",
            ratio: opt(f[5])?,
        });
    }
    Ok(rows)
}
