use std::path::PathBuf;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Shape of the encoder-decoder backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// 0 means "take it from the tokenizer".
    pub vocab_size: usize,
    /// Layers in each of the encoder and decoder.
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    /// Pretrained weights (safetensors, BART parameter names).
    pub checkpoint: Option<PathBuf>,
    /// Randomly initialized desk-scale backbone.
    pub tiny_mode: bool,
    /// Seed for tiny-mode initialization; part of the backbone identity.
    pub init_seed: u64,
    pub precision: Precision,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::tiny(0)
    }
}

impl BackboneConfig {
    /// 2+2 layers, d = 64; vocabulary filled in from the tokenizer.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            max_positions: 128,
            checkpoint: None,
            tiny_mode: true,
            init_seed: 0,
            precision: Precision::F32,
        }
    }

    /// Layout of the base-size pretrained model.
    pub fn base(checkpoint: PathBuf) -> Self {
        Self {
            vocab_size: 50265,
            num_layers: 6,
            hidden_dim: 768,
            num_heads: 12,
            ffn_dim: 3072,
            max_positions: 1024,
            checkpoint: Some(checkpoint),
            tiny_mode: false,
            init_seed: 0,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be set".into()));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.ffn_dim == 0 || self.max_positions < 3 {
            return Err(Error::Config("num_layers, ffn_dim and max_positions must be positive".into()));
        }
        match (self.tiny_mode, &self.checkpoint) {
            (true, Some(_)) => Err(Error::Config("tiny_mode backbones take no checkpoint".into())),
            (false, None) => Err(Error::Config("a checkpoint is required unless tiny_mode is set".into())),
            _ => Ok(()),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Silu,
    Relu,
    Tanh,
}

/// Bottleneck adapter inserted after the feed-forward block of every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSpec {
    /// hidden_dim / bottleneck_dim.
    pub reduction_factor: usize,
    pub nonlinearity: Activation,
    /// Standard deviation of the up-projection at init.
    pub init_scale: f64,
    pub init_seed: u64,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            reduction_factor: 16,
            nonlinearity: Activation::Gelu,
            init_scale: 1e-4,
            init_seed: 1,
        }
    }
}

impl AdapterSpec {
    pub fn bottleneck_dim(&self, hidden_dim: usize) -> Result<usize> {
        if self.reduction_factor == 0 || self.reduction_factor >= hidden_dim {
            return Err(Error::Config(format!(
                "reduction_factor {} must be in [1, hidden_dim {})",
                self.reduction_factor, hidden_dim
            )));
        }
        Ok((hidden_dim / self.reduction_factor).max(1))
    }
}

/// Which stack's final-layer states represent a token.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionSide {
    #[default]
    Decoder,
    Encoder,
}
