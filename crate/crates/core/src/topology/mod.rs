//! Model scaling and the dual-branch detector graph.

mod graph;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use graph::{
    Branch, Layer, LayerKind, LevelOutput, Modality, ModelConfig, ModelGraph, Node, NodeStats,
};

/// Unscaled channel widths at pyramid levels P1..P5.
pub const BASE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];
/// Strides of P1..P5 relative to the input.
pub const STRIDES: [usize; 5] = [2, 4, 8, 16, 32];
/// Stage-block repeats before depth scaling.
pub const BASE_REPEATS: usize = 2;
/// Attention blocks at P5 before depth scaling.
pub const BASE_CSIF_BLOCKS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub name: String,
    pub depth_multiple: f64,
    pub width_multiple: f64,
    pub max_channels: usize,
}

impl ScaleConfig {
    pub const PRESETS: [&'static str; 5] = ["n", "s", "m", "l", "x"];

    pub fn preset(name: &str) -> Option<ScaleConfig> {
        let (d, w, m) = match name {
            "n" => (0.50, 0.25, 1024),
            "s" => (0.50, 0.50, 1024),
            "m" => (0.50, 1.00, 512),
            "l" => (1.00, 1.00, 512),
            "x" => (1.00, 1.50, 512),
            _ => return None,
        };
        Some(ScaleConfig {
            name: name.to_string(),
            depth_multiple: d,
            width_multiple: w,
            max_channels: m,
        })
    }

    /// Desk-scale variant used for training experiments: channels
    /// 8/16/32/64/128.
    pub fn micro() -> ScaleConfig {
        ScaleConfig {
            name: "micro".into(),
            depth_multiple: 0.5,
            width_multiple: 0.125,
            max_channels: 1024,
        }
    }

    pub fn custom(name: &str, depth: f64, width: f64, max_channels: usize) -> Result<ScaleConfig> {
        let cfg = ScaleConfig {
            name: name.to_string(),
            depth_multiple: depth,
            width_multiple: width,
            max_channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.depth_multiple) || !ok(self.width_multiple) || self.max_channels == 0 {
            return Err(Error::Config(format!(
                "scale '{}' needs positive depth, width and channel cap",
                self.name
            )));
        }
        Ok(())
    }

    /// Resolves a preset name (`n`, `s`, `m`, `l`, `x`) or `micro`.
    pub fn by_name(name: &str) -> Result<ScaleConfig> {
        if name == "micro" {
            return Ok(ScaleConfig::micro());
        }
        ScaleConfig::preset(name)
            .ok_or_else(|| Error::Config(format!("unknown scale '{name}' (expected n|s|m|l|x|micro)")))
    }
}

/// Width of a layer whose unscaled width is `base`: the capped, scaled
/// width rounded to the nearest multiple of 8, never below 8.
pub fn scale_channels(base: usize, cfg: &ScaleConfig) -> usize {
    let scaled = base.min(cfg.max_channels) as f64 * cfg.width_multiple;
    (((scaled / 8.0).round() as usize) * 8).max(8)
}

pub fn scale_depth(base_repeats: usize, cfg: &ScaleConfig) -> usize {
    ((base_repeats as f64 * cfg.depth_multiple).round() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChannelPlan {
    pub channels: [usize; 5],
    pub strides: [usize; 5],
    pub repeats: usize,
    pub csif_blocks: usize,
}

impl ChannelPlan {
    pub fn new(cfg: &ScaleConfig) -> ChannelPlan {
        ChannelPlan {
            channels: BASE_WIDTHS.map(|b| scale_channels(b, cfg)),
            strides: STRIDES,
            repeats: scale_depth(BASE_REPEATS, cfg),
            csif_blocks: scale_depth(BASE_CSIF_BLOCKS, cfg),
        }
    }
}
