use serde::{Deserialize, Serialize};

use super::attention::AttentionBlock;
use super::estimator::IlluminationEstimator;
use super::layers::Linear;
use crate::error::{Error, Result};

/// Architecture variant; the three rows of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// RGB and thermal branches fused by cross-attention (full model).
    #[default]
    CrossAttention,
    /// RGB-only self-attention; thermal is ignored.
    SelfOnly,
    /// Thermal appended as a fourth input channel to a single branch.
    Concat4,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::SelfOnly, Variant::Concat4, Variant::CrossAttention];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::CrossAttention => "cross_attention",
            Variant::SelfOnly => "self_only",
            Variant::Concat4 => "concat4",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Variant::CrossAttention => 0,
            Variant::SelfOnly => 1,
            Variant::Concat4 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Variant::CrossAttention),
            1 => Some(Variant::SelfOnly),
            2 => Some(Variant::Concat4),
            _ => None,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_attention" => Ok(Variant::CrossAttention),
            "self_only" => Ok(Variant::SelfOnly),
            "concat4" => Ok(Variant::Concat4),
            other => Err(Error::Config(format!("unknown ablation mode {other}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature channels `C` per branch.
    pub base_channels: usize,
    pub heads: usize,
    pub attention_blocks_per_branch: usize,
    /// Channels kept by the PCA reduction.
    pub fused_channels: usize,
    pub patch_train_size: usize,
    /// Hidden width of the feed-forward layer inside each attention block.
    pub ffn_hidden: usize,
    /// Hidden width of the per-pixel reconstruction MLP.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    /// Full-size configuration: 650,324 trainable scalars for the
    /// cross-attention variant.
    fn default() -> Self {
        Self {
            base_channels: 80,
            heads: 4,
            attention_blocks_per_branch: 5,
            fused_channels: 80,
            patch_train_size: 128,
            ffn_hidden: 160,
            head_hidden: 160,
        }
    }
}

impl ModelConfig {
    /// Small configuration for desk-scale experiments and tests.
    pub fn desk() -> Self {
        Self {
            base_channels: 16,
            heads: 4,
            attention_blocks_per_branch: 1,
            fused_channels: 16,
            patch_train_size: 128,
            ffn_hidden: 32,
            head_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("base_channels", self.base_channels),
            ("heads", self.heads),
            ("attention_blocks_per_branch", self.attention_blocks_per_branch),
            ("fused_channels", self.fused_channels),
            ("patch_train_size", self.patch_train_size),
            ("ffn_hidden", self.ffn_hidden),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.base_channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "base_channels {} is not divisible by heads {}",
                self.base_channels, self.heads
            )));
        }
        if self.fused_channels > 2 * self.base_channels {
            return Err(Error::Config(format!(
                "fused_channels {} exceeds 2 * base_channels",
                self.fused_channels
            )));
        }
        Ok(())
    }

    /// Width of the features entering the PCA reduction.
    pub fn fusion_width(&self, variant: Variant) -> usize {
        match variant {
            Variant::CrossAttention => 2 * self.base_channels,
            Variant::SelfOnly | Variant::Concat4 => self.base_channels,
        }
    }

    pub fn validate_for(&self, variant: Variant) -> Result<()> {
        self.validate()?;
        if self.fused_channels > self.fusion_width(variant) {
            return Err(Error::Config(format!(
                "fused_channels {} exceeds the {} channels available to the {variant} variant",
                self.fused_channels,
                self.fusion_width(variant)
            )));
        }
        Ok(())
    }
}

/// Trainable scalars of the full cross-attention model.
///
/// With `C` channels, `B` blocks, FFN width `F`, PCA width `C_f` and head
/// width `H`:
///
/// ```text
/// RGB estimator      (3 + 1) C + C + 26 C + C + 1
/// thermal estimator  (1 + 1) C + C + 26 C
/// embeddings         3 C + C  +  1 C + C
/// self blocks        2 B (5 C^2 + 2 C + 2 C F + F + C)
/// cross block        4 C^2 + C + 2 C F + F + C
/// head               C_f H + H + 3 H + 3
/// ```
pub fn num_parameters(cfg: &ModelConfig) -> usize {
    num_parameters_for(cfg, Variant::CrossAttention)
}

pub fn num_parameters_for(cfg: &ModelConfig, variant: Variant) -> usize {
    let c = cfg.base_channels;
    let block = AttentionBlock::num_params(c, cfg.ffn_hidden, true);
    let head = Linear::num_params(cfg.fused_channels, cfg.head_hidden, true)
        + Linear::num_params(cfg.head_hidden, 3, true);
    let b = cfg.attention_blocks_per_branch;
    match variant {
        Variant::CrossAttention => {
            IlluminationEstimator::num_params(3, c, true)
                + IlluminationEstimator::num_params(1, c, false)
                + Linear::num_params(3, c, true)
                + Linear::num_params(1, c, true)
                + 2 * b * block
                + AttentionBlock::num_params(c, cfg.ffn_hidden, false)
                + head
        }
        Variant::SelfOnly => {
            IlluminationEstimator::num_params(3, c, true) + Linear::num_params(3, c, true) + b * block + head
        }
        Variant::Concat4 => {
            IlluminationEstimator::num_params(4, c, true) + Linear::num_params(4, c, true) + b * block + head
        }
    }
}
