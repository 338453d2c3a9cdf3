use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::conv_out_len;

/// Which stack produces the context outputs of the encoder-only subtasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureVariant {
    /// Speech encoder followed by the shared encoder (ASR pre-training).
    #[default]
    Fse,
    /// Speech encoder only (ST pre-training).
    Pse,
}

impl std::fmt::Display for ArchitectureVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fse => "fse",
            Self::Pse => "pse",
        })
    }
}

impl std::str::FromStr for ArchitectureVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fse" => Ok(Self::Fse),
            "pse" => Ok(Self::Pse),
            other => Err(Error::config("variant", format!("expected fse or pse, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: ArchitectureVariant,
    /// Width of one input frame (1 for raw audio samples).
    pub input_dim: usize,
    pub conv_channels: usize,
    pub conv_strides: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub n_speech_layers: usize,
    pub n_shared_layers: usize,
    pub n_decoder_layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    pub phoneme_vocab_size: usize,
    pub token_vocab_size: usize,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Default desk-scale network: every wiring of the full model with
    /// dimensions small enough for CPU training.
    pub fn desk() -> Self {
        Self {
            variant: ArchitectureVariant::Fse,
            input_dim: 8,
            conv_channels: 32,
            conv_strides: vec![2, 2],
            conv_kernels: vec![2, 2],
            n_speech_layers: 2,
            n_shared_layers: 2,
            n_decoder_layers: 2,
            model_dim: 64,
            ffn_dim: 128,
            n_heads: 4,
            phoneme_vocab_size: 63,
            token_vocab_size: 94,
            max_positions: 512,
        }
    }

    /// Full-size configuration (raw 16 kHz audio input). Only its
    /// shape arithmetic is exercised here; instantiating it is not intended.
    pub fn full_scale() -> Self {
        Self {
            variant: ArchitectureVariant::Fse,
            input_dim: 1,
            conv_channels: 512,
            conv_strides: vec![5, 2, 2, 2, 2, 2, 2],
            conv_kernels: vec![10, 3, 3, 3, 3, 2, 2],
            n_speech_layers: 6,
            n_shared_layers: 6,
            n_decoder_layers: 6,
            model_dim: 768,
            ffn_dim: 3072,
            n_heads: 8,
            phoneme_vocab_size: 134,
            token_vocab_size: 10_000,
            max_positions: 4096,
        }
    }

    /// Width-8 model with one layer per stack, used for gradient checks.
    pub fn micro() -> Self {
        Self {
            conv_channels: 4,
            n_speech_layers: 1,
            n_shared_layers: 1,
            n_decoder_layers: 1,
            model_dim: 8,
            ffn_dim: 16,
            n_heads: 2,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_strides.len() != self.conv_kernels.len() {
            return Err(Error::config(
                "model.conv_strides",
                "must have the same length as conv_kernels",
            ));
        }
        if self.conv_strides.is_empty() {
            return Err(Error::config("model.conv_strides", "at least one conv layer"));
        }
        if self.conv_strides.iter().chain(&self.conv_kernels).any(|&v| v == 0) {
            return Err(Error::config("model.conv_strides", "strides and kernels must be positive"));
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::config("model.n_heads", "model_dim must be divisible by n_heads"));
        }
        for (field, v) in [
            ("model.input_dim", self.input_dim),
            ("model.conv_channels", self.conv_channels),
            ("model.ffn_dim", self.ffn_dim),
            ("model.phoneme_vocab_size", self.phoneme_vocab_size),
            ("model.token_vocab_size", self.token_vocab_size),
            ("model.max_positions", self.max_positions),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.model_dim < 2 || self.conv_channels < 2 {
            return Err(Error::config("model.model_dim", "normalized widths must be at least 2"));
        }
        Ok(())
    }

    /// Product of the conv strides: input frames per context frame once the
    /// input is long enough.
    pub fn downsample_factor(&self) -> usize {
        self.conv_strides.iter().product()
    }

    /// Shortest input producing one context frame.
    pub fn receptive_field(&self) -> usize {
        self.conv_strides
            .iter()
            .zip(&self.conv_kernels)
            .rev()
            .fold(1, |r, (&s, &k)| (r - 1) * s + k)
    }

    /// Context length after the feature extractor: `⌊(L − k)/s⌋ + 1` per layer.
    pub fn context_len(&self, input_len: usize) -> Result<usize> {
        if input_len < self.receptive_field() {
            return Err(Error::Length(format!(
                "input of {input_len} frames is shorter than the receptive field {}",
                self.receptive_field()
            )));
        }
        self.conv_strides
            .iter()
            .zip(&self.conv_kernels)
            .try_fold(input_len, |len, (&s, &k)| conv_out_len(len, k, s))
    }
}
