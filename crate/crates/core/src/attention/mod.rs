//! Attention cores, window partitioning and the windowed multi-head layer.

mod kernels;
mod layer;
mod meter;
mod window;

pub use kernels::*;
pub use layer::*;
pub use meter::BufferMeter;
pub use window::*;
