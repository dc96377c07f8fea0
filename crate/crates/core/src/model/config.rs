//! Architecture hyperparameters.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Channels of the first stage, fixed by the patch embedding.
pub const EMBED_CHANNELS: usize = 96;
/// Channels per attention head.
pub const HEAD_WIDTH: usize = 32;
/// Total downsampling of the global path.
pub const DOWNSAMPLE: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub window_side: usize,
    pub mlp_ratio: f64,
    pub scp_channels: [usize; 6],
    pub scp_strides: [usize; 6],
    pub fpn_dim: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: [96, 192, 384, 768],
            stage_depths: [1, 1, 2, 1],
            window_side: 16,
            mlp_ratio: 4.0,
            scp_channels: [64, 64, 128, 128, 128, 128],
            scp_strides: [2, 2, 1, 1, 1, 1],
            fpn_dim: 384,
            head_hidden: 256,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: window 4 and a slim decoder and spatial path.
    pub fn toy() -> Self {
        ModelConfig {
            window_side: 4,
            mlp_ratio: 2.0,
            scp_channels: [16, 16, 32, 32, 32, 32],
            fpn_dim: 64,
            head_hidden: 32,
            ..Default::default()
        }
    }

    /// Deeper stages, `[2, 2, 6, 2]`.
    pub fn paper_scale() -> Self {
        ModelConfig {
            stage_depths: [2, 2, 6, 2],
            ..Default::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "toy" => Ok(Self::toy()),
            "paper-scale" => Ok(Self::paper_scale()),
            _ => Err(Error::Config(format!("unknown model preset `{name}`"))),
        }
    }

    pub fn heads(&self) -> [usize; 4] {
        self.stage_channels.map(|c| c / HEAD_WIDTH)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.stage_channels;
        if c[0] != EMBED_CHANNELS {
            return Err(Error::Config(format!(
                "stage_channels must start at {EMBED_CHANNELS}, got {}",
                c[0]
            )));
        }
        for i in 1..4 {
            if c[i] != 2 * c[i - 1] {
                return Err(Error::Config(format!("stage_channels must double per stage, got {c:?}")));
            }
        }
        if self.stage_depths.contains(&0) {
            return Err(Error::Config("stage_depths must be >= 1".into()));
        }
        if self.window_side == 0 {
            return Err(Error::Config("window_side must be >= 1".into()));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) {
            return Err(Error::Config(format!("mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        if self.scp_channels.contains(&0) || self.scp_strides.contains(&0) {
            return Err(Error::Config("scp_channels and scp_strides must be >= 1".into()));
        }
        let stride: usize = self.scp_strides.iter().product();
        if stride != 4 {
            return Err(Error::Config(format!(
                "scp_strides must multiply to 4, got {:?} (product {stride})",
                self.scp_strides
            )));
        }
        if self.fpn_dim == 0 || self.head_hidden == 0 {
            return Err(Error::Config("fpn_dim and head_hidden must be >= 1".into()));
        }
        Ok(())
    }

    /// Set one field from its text form (`[a,b,...]` for lists).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "stage_channels" => self.stage_channels = parse_array(key, value)?,
            "stage_depths" => self.stage_depths = parse_array(key, value)?,
            "window_side" => self.window_side = parse_value(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse_value(key, value)?,
            "scp_channels" => self.scp_channels = parse_array(key, value)?,
            "scp_strides" => self.scp_strides = parse_array(key, value)?,
            "fpn_dim" => self.fpn_dim = parse_value(key, value)?,
            "head_hidden" => self.head_hidden = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    /// Field values in the text form accepted by [`ModelConfig::set`].
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("stage_channels", format_array(&self.stage_channels)),
            ("stage_depths", format_array(&self.stage_depths)),
            ("window_side", self.window_side.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("scp_channels", format_array(&self.scp_channels)),
            ("scp_strides", format_array(&self.scp_strides)),
            ("fpn_dim", self.fpn_dim.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
        ]
    }
}

pub fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("malformed value `{value}` for `{key}`")))
}

pub fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    let v = value.trim();
    let inner = v
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| Error::Config(format!("`{key}` expects a list like [1,2], got `{value}`")))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner.split(',').map(|s| parse_value(key, s)).collect()
}

pub fn parse_array<V: FromStr, const N: usize>(key: &str, value: &str) -> Result<[V; N]> {
    let items: Vec<V> = parse_list(key, value)?;
    let n = items.len();
    items
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` expects {N} entries, got {n}")))
}

pub fn format_array<V: Display>(xs: &[V]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(","))
}
