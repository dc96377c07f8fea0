//! Synthetic aerial tiles with rectangular and L-shaped buildings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sample::SegSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub min_buildings: usize,
    pub max_buildings: usize,
    /// Accepted range of the building-pixel fraction.
    pub fraction: (f64, f64),
    /// Side range of ordinary buildings, in pixels.
    pub side: (usize, usize),
    /// Probability that a building is tiny (side below 8).
    pub tiny_prob: f64,
    /// Probability that a building is placed flush against the previous one.
    pub adjacent_prob: f64,
    pub l_shape_prob: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            min_buildings: 1,
            max_buildings: 8,
            fraction: (0.05, 0.4),
            side: (8, 24),
            tiny_prob: 0.15,
            adjacent_prob: 0.3,
            l_shape_prob: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    top: usize,
    left: usize,
    h: usize,
    w: usize,
}

const GROUND: [[f32; 3]; 3] = [[0.24, 0.33, 0.18], [0.40, 0.35, 0.27], [0.30, 0.30, 0.32]];
const ROOFS: [[f32; 3]; 4] = [[0.78, 0.76, 0.72], [0.66, 0.33, 0.26], [0.58, 0.60, 0.66], [0.85, 0.80, 0.62]];

fn smooth_noise(rng: &mut ChaCha8Rng, size: usize, waves: usize) -> Vec<f32> {
    let params: Vec<(f32, f32, f32, f32)> = (0..waves)
        .map(|_| {
            (
                rng.random_range(0.5..3.0f32),
                rng.random_range(0.5..3.0f32),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.3..1.0f32),
            )
        })
        .collect();
    let norm: f32 = params.iter().map(|p| p.3).sum();
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f32 / size as f32, (i % size) as f32 / size as f32);
            params
                .iter()
                .map(|&(fy, fx, ph, a)| a * (std::f32::consts::TAU * (fy * y + fx * x) + ph).sin())
                .sum::<f32>()
                / norm
        })
        .collect()
}

fn draw_attempt(rng: &mut ChaCha8Rng, size: usize, p: &SynthParams) -> (Vec<f32>, Vec<bool>) {
    let ground = GROUND[rng.random_range(0..GROUND.len())];
    let low = smooth_noise(rng, size, 4);
    let mut img = vec![0f32; 3 * size * size];
    for i in 0..size * size {
        for c in 0..3 {
            let grain: f32 = rng.random_range(-0.04..0.04);
            img[c * size * size + i] = ground[c] + 0.08 * low[i] + grain;
        }
    }
    let mut mask = vec![false; size * size];
    let n = rng.random_range(p.min_buildings..=p.max_buildings);
    let mut prev: Option<Rect> = None;
    for _ in 0..n {
        let tiny = rng.random_bool(p.tiny_prob);
        let (lo, hi) = if tiny { (3, 7) } else { p.side };
        let h = rng.random_range(lo..=hi).min(size - 2);
        let w = rng.random_range(lo..=hi).min(size - 2);
        let rect = match prev {
            Some(q) if !tiny && rng.random_bool(p.adjacent_prob) => {
                // flush to the right of, or below, the previous building
                if rng.random_bool(0.5) {
                    Rect { top: q.top.min(size - 1 - h), left: (q.left + q.w).min(size - 1 - w), h, w }
                } else {
                    Rect { top: (q.top + q.h).min(size - 1 - h), left: q.left.min(size - 1 - w), h, w }
                }
            }
            _ => Rect {
                top: rng.random_range(1..size - h),
                left: rng.random_range(1..size - w),
                h,
                w,
            },
        };
        let mut parts = vec![rect];
        if !tiny && rng.random_bool(p.l_shape_prob) && rect.h >= 8 && rect.w >= 8 {
            // cut a corner out of the rectangle
            let (ch, cw) = (rect.h / 2, rect.w / 2);
            parts = vec![
                Rect { top: rect.top, left: rect.left, h: rect.h, w: rect.w - cw },
                Rect { top: rect.top + ch, left: rect.left + rect.w - cw, h: rect.h - ch, w: cw },
            ];
        }
        let roof = ROOFS[rng.random_range(0..ROOFS.len())];
        let tone: f32 = rng.random_range(-0.06..0.06);
        for r in &parts {
            // shadow on the south-east side
            for y in r.top + 1..(r.top + r.h + 2).min(size) {
                for x in r.left + 1..(r.left + r.w + 2).min(size) {
                    if !mask[y * size + x] {
                        for c in 0..3 {
                            img[c * size * size + y * size + x] *= 0.6;
                        }
                    }
                }
            }
        }
        for r in &parts {
            for y in r.top..r.top + r.h {
                for x in r.left..r.left + r.w {
                    mask[y * size + x] = true;
                    for c in 0..3 {
                        let grain: f32 = rng.random_range(-0.015..0.015);
                        img[c * size * size + y * size + x] = roof[c] + tone + grain;
                    }
                }
            }
        }
        prev = Some(rect);
    }
    for v in img.iter_mut() {
        // quantize to 8 bits so that files round-trip exactly
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    (img, mask)
}

/// One deterministic sample for `(seed, index)`. Draws are retried until the
/// building fraction falls inside `params.fraction`.
pub fn synth_sample(seed: u64, index: usize, size: usize, params: &SynthParams) -> Result<SegSample> {
    if size < 16 {
        return Err(Error::Precondition(format!("synthetic tiles need size >= 16, got {size}")));
    }
    if params.min_buildings == 0 || params.min_buildings > params.max_buildings {
        return Err(Error::Config("building count range must satisfy 1 <= min <= max".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    for _ in 0..1000 {
        let (img, mask) = draw_attempt(&mut rng, size, params);
        let frac = mask.iter().filter(|&&m| m).count() as f64 / (size * size) as f64;
        if frac >= params.fraction.0 && frac <= params.fraction.1 {
            let image = Tensor::new(&[3, size, size], img)?;
            let mask = Tensor::new(&[1, size, size], mask.iter().map(|&m| m as u8 as f32).collect())?;
            return SegSample::new(format!("synth_{seed}_{index:05}"), image, mask);
        }
    }
    Err(Error::Config(format!(
        "could not reach building fraction {:?} at size {size}",
        params.fraction
    )))
}

pub fn synth_generate(seed: u64, n: usize, size: usize, params: &SynthParams) -> Result<Vec<SegSample>> {
    (0..n).map(|i| synth_sample(seed, i, size, params)).collect()
}
