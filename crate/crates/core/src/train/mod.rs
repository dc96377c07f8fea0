//! AdamW, the cosine schedule, the training loop, evaluation and fine-tuning.

mod engine;
mod optim;

pub use engine::*;
pub use optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig};
