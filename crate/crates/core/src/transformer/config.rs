use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    Standard,
    Glu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnMask {
    Causal,
    Bidirectional,
}

/// Layer-normalization epsilon used everywhere in the stack.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Token dimension d.
    pub d_model: usize,
    /// FFN hidden dimension D.
    pub d_ffn: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub activation: Activation,
    pub ffn_kind: FfnKind,
    pub attn_mask: AttnMask,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("vocab", self.vocab),
            ("max_len", self.max_len),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ffn_kind == FfnKind::Glu && self.activation != Activation::Silu {
            return Err(Error::config("glu ffn requires silu activation"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Desk-scale defaults: a configuration small enough to train on a CPU
    /// in minutes while exercising every mechanism.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            d_ffn: 256,
            n_layers: 4,
            n_heads: 4,
            vocab: 64,
            max_len: 16,
            activation: Activation::Gelu,
            ffn_kind: FfnKind::Standard,
            attn_mask: AttnMask::Causal,
        }
    }
}

/// A validated token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.ids.len() > config.max_len {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_len {}",
                self.ids.len(),
                config.max_len
            )));
        }
        if let Some(&bad) = self.ids.iter().find(|&&id| id >= config.vocab) {
            return Err(Error::invalid(format!(
                "token id {bad} out of vocabulary {}",
                config.vocab
            )));
        }
        Ok(())
    }
}
