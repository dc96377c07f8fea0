//! The segmentation network, its parameters and checkpoints.

mod checkpoint;
mod config;
mod layers;
mod net;
mod params;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{format_array, parse_array, parse_list, parse_value, ModelConfig, DOWNSAMPLE, EMBED_CHANNELS, HEAD_WIDTH};
pub use layers::{BatchNorm, Block, CMlp, Cbr, Conv, PatchEmbed, PatchMerge};
pub use net::{BuildFormer, IN_CHANNELS};
pub use params::{BnUpdate, Buffer, BufferId, Forward, Mode, ParamId, ParamStore, Parameter, BN_EPS, BN_MOMENTUM};
