//! Declarative model description and the named presets.
//!
//! Configs serialize to JSON. A minimal document only needs `stages`,
//! `decoder_channels` and `num_classes`; every other field has a default:
//!
//! ```json
//! {
//!   "name": "custom",
//!   "stages": [
//!     {"channels": 32, "depth": 1, "reduction": 8, "heads": 1, "ffn_ratio": 4},
//!     {"channels": 64, "depth": 1, "reduction": 4, "heads": 1, "ffn_ratio": 4},
//!     {"channels": 128, "depth": 2, "reduction": 2, "heads": 2, "ffn_ratio": 4},
//!     {"channels": 256, "depth": 1, "reduction": 1, "heads": 4, "ffn_ratio": 4}
//!   ],
//!   "decoder_channels": 256,
//!   "num_classes": 19,
//!   "patch_mode": "nonoverlap",
//!   "embed_norm": "batch",
//!   "bias": true,
//!   "bypass_unit_reduction": false,
//!   "norm_eps": 1e-5,
//!   "bn_momentum": 0.1
//! }
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of encoder stages.
pub const NUM_STAGES: usize = 4;
/// Input image channels.
pub const IN_CHANNELS: usize = 3;
/// The input side length must be a multiple of this (total encoder stride).
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    /// Spatial reduction ratio applied to keys and values.
    pub reduction: usize,
    pub heads: usize,
    /// Hidden width multiplier of the feed-forward block.
    pub ffn_ratio: usize,
}

impl StageConfig {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchMode {
    /// 4×4 stride 4 for stage 1, 2×2 stride 2 afterwards.
    #[default]
    Nonoverlap,
    /// 7×7 stride 4 pad 3 for stage 1, 3×3 stride 2 pad 1 afterwards.
    Overlap,
}

impl PatchMode {
    /// `(kernel, stride, padding)` of the patch projection of stage `stage` (0-based).
    pub fn geometry(self, stage: usize) -> (usize, usize, usize) {
        match (self, stage) {
            (PatchMode::Nonoverlap, 0) => (4, 4, 0),
            (PatchMode::Nonoverlap, _) => (2, 2, 0),
            (PatchMode::Overlap, 0) => (7, 4, 3),
            (PatchMode::Overlap, _) => (3, 2, 1),
        }
    }
}

impl FromStr for PatchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonoverlap" => Ok(PatchMode::Nonoverlap),
            "overlap" => Ok(PatchMode::Overlap),
            other => Err(Error::config("patch_mode", format!("unknown mode `{other}`"))),
        }
    }
}

impl fmt::Display for PatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatchMode::Nonoverlap => "nonoverlap",
            PatchMode::Overlap => "overlap",
        })
    }
}

/// Normalization after each patch projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedNorm {
    #[default]
    Batch,
    Layer,
}

fn default_true() -> bool {
    true
}

fn default_eps() -> f64 {
    1e-5
}

fn default_momentum() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub stages: Vec<StageConfig>,
    /// Width of the fused decoder feature.
    pub decoder_channels: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub patch_mode: PatchMode,
    #[serde(default)]
    pub embed_norm: EmbedNorm,
    /// Biases on every convolution and projection.
    #[serde(default = "default_true")]
    pub bias: bool,
    /// With reduction 1, use the normalized input tokens as keys/values
    /// instead of running the three reduction branches.
    #[serde(default)]
    pub bypass_unit_reduction: bool,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
}

/// Names accepted by [`ModelConfig::preset`].
pub const PRESET_NAMES: [&str; 4] = ["ipt-t", "ipt-s", "ipt-b", "micro"];

const PYRAMID_CHANNELS: [usize; 4] = [64, 128, 320, 512];
const PYRAMID_HEADS: [usize; 4] = [1, 2, 5, 8];
const PYRAMID_REDUCTION: [usize; 4] = [8, 4, 2, 1];

impl ModelConfig {
    fn pyramid(name: &str, depths: [usize; 4], decoder_channels: usize) -> Self {
        let stages = (0..NUM_STAGES)
            .map(|i| StageConfig {
                channels: PYRAMID_CHANNELS[i],
                depth: depths[i],
                reduction: PYRAMID_REDUCTION[i],
                heads: PYRAMID_HEADS[i],
                ffn_ratio: 4,
            })
            .collect();
        ModelConfig {
            name: name.to_string(),
            stages,
            decoder_channels,
            num_classes: 150,
            patch_mode: PatchMode::Nonoverlap,
            embed_norm: EmbedNorm::Batch,
            bias: true,
            bypass_unit_reduction: false,
            norm_eps: default_eps(),
            bn_momentum: default_momentum(),
        }
    }

    pub fn ipt_t() -> Self {
        Self::pyramid("ipt-t", [2, 2, 4, 2], 512)
    }

    pub fn ipt_s() -> Self {
        Self::pyramid("ipt-s", [3, 4, 12, 3], 768)
    }

    pub fn ipt_b() -> Self {
        Self::pyramid("ipt-b", [3, 6, 24, 2], 768)
    }

    /// A tiny two-class model for gradient checks and smoke training.
    pub fn micro() -> Self {
        let stages = PYRAMID_REDUCTION
            .iter()
            .map(|&reduction| StageConfig {
                channels: 8,
                depth: 1,
                reduction,
                heads: 1,
                ffn_ratio: 2,
            })
            .collect();
        ModelConfig {
            name: "micro".into(),
            stages,
            decoder_channels: 16,
            num_classes: 2,
            ..Self::ipt_t()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "ipt-t" => Some(Self::ipt_t()),
            "ipt-s" => Some(Self::ipt_s()),
            "ipt-b" => Some(Self::ipt_b()),
            "micro" => Some(Self::micro()),
            _ => None,
        }
    }

    /// Resolves a preset name, or else reads a JSON file at that path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match Self::preset(name_or_path) {
            Some(cfg) => Ok(cfg),
            None => Self::load(name_or_path),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Parses and validates. Syntax errors report line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "model config".into(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != NUM_STAGES {
            return Err(Error::config(
                "stages",
                format!("expected exactly {NUM_STAGES} stages, got {}", self.stages.len()),
            ));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let field = |name: &str| format!("stages[{i}].{name}");
            if s.channels == 0 {
                return Err(Error::config(field("channels"), "must be positive"));
            }
            if s.heads == 0 {
                return Err(Error::config(field("heads"), "must be positive"));
            }
            if s.channels % s.heads != 0 {
                return Err(Error::config(
                    field("heads"),
                    format!("{} channels are not divisible by {} heads", s.channels, s.heads),
                ));
            }
            if s.depth == 0 {
                return Err(Error::config(field("depth"), "must be at least 1"));
            }
            if s.reduction == 0 {
                return Err(Error::config(field("reduction"), "must be at least 1"));
            }
            if s.ffn_ratio == 0 {
                return Err(Error::config(field("ffn_ratio"), "must be at least 1"));
            }
        }
        if self.decoder_channels == 0 {
            return Err(Error::config("decoder_channels", "must be positive"));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::config("num_classes", "must lie in 2..=255"));
        }
        if !self.norm_eps.is_finite() || self.norm_eps < 0.0 {
            return Err(Error::config("norm_eps", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("bn_momentum", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Checks that an `h×w` input runs through every stage.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
            return Err(Error::config(
                "input",
                format!("{h}×{w} is not a positive multiple of {INPUT_MULTIPLE}"),
            ));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let (sh, sw) = self.stage_size(i, h, w);
            if sh < s.reduction || sw < s.reduction {
                return Err(Error::config(
                    format!("stages[{i}].reduction"),
                    format!("reduction {} exceeds the {sh}×{sw} stage map", s.reduction),
                ));
            }
        }
        Ok(())
    }

    /// Spatial size of stage `stage`'s output for an `h×w` input.
    pub fn stage_size(&self, stage: usize, h: usize, w: usize) -> (usize, usize) {
        let div = 1 << (stage + 2);
        (h / div, w / div)
    }

    pub fn concat_channels(&self) -> usize {
        self.stages.iter().map(|s| s.channels).sum()
    }

    /// Whether the reduction branches of stage `stage` are skipped.
    pub fn bypasses_reduction(&self, stage: usize) -> bool {
        self.bypass_unit_reduction && self.stages[stage].reduction == 1
    }
}
