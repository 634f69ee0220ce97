use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Bidirectional attention, masked-language-model pre-training.
    Encoder,
    /// Causal attention, next-token pre-training.
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub dropout_p: f64,
    pub architecture: Architecture,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            hidden_size: 128,
            num_layers: 4,
            num_heads: 4,
            max_seq_len: 128,
            dropout_p: 0.1,
            architecture: Architecture::Encoder,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size == 0 || self.hidden_size == 0 || self.num_layers == 0 || self.max_seq_len == 0 {
            return fail("vocab_size, hidden_size, num_layers and max_seq_len must be positive");
        }
        if self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
            return fail("num_heads must divide hidden_size");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail("dropout_p must lie in [0, 1)");
        }
        Ok(())
    }

    /// Width of the feed-forward inner layer.
    pub fn ffn_size(&self) -> usize {
        4 * self.hidden_size
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Named size presets used by the runner's `--model_name_or_path`.
    pub fn preset(name: &str) -> Option<Self> {
        let base = Self::default();
        let (hidden_size, num_layers, num_heads) = match name {
            "toy-tiny" => (32, 1, 2),
            "toy-small" => (64, 2, 4),
            "toy-base" => (128, 4, 4),
            _ => return None,
        };
        Some(Self { hidden_size, num_layers, num_heads, ..base })
    }
}
