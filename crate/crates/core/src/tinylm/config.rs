use serde::{Deserialize, Serialize};

use super::tokenizer::MIN_VOCAB;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub context_len: usize,
    pub n_heads: usize,
    /// Hidden width of the feed-forward block.
    pub ffn_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 160,
            embed_dim: 64,
            n_layers: 2,
            context_len: 128,
            n_heads: 1,
            ffn_dim: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, prefix: &str, errors: &mut Vec<String>) {
        if self.vocab_size < MIN_VOCAB {
            errors.push(format!(
                "{prefix}.vocab_size must be at least {MIN_VOCAB}, got {}",
                self.vocab_size
            ));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("n_layers", self.n_layers),
            ("context_len", self.context_len),
            ("ffn_dim", self.ffn_dim),
        ] {
            if v == 0 {
                errors.push(format!("{prefix}.{name} must be positive"));
            }
        }
        if self.n_heads != 1 {
            errors.push(format!("{prefix}.n_heads must be 1, got {}", self.n_heads));
        }
    }

    pub fn check(&self) -> Result<()> {
        let mut errors = Vec::new();
        self.validate("model", &mut errors);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(errors.join("; ")))
        }
    }
}

/// Base-model pretraining schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 400,
            lr: 3e-3,
            batch_size: 8,
            weight_decay: 0.01,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, prefix: &str, errors: &mut Vec<String>) {
        if self.steps == 0 {
            errors.push(format!("{prefix}.steps must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errors.push(format!("{prefix}.lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            errors.push(format!("{prefix}.batch_size must be at least 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            errors.push(format!("{prefix}.weight_decay must be non-negative"));
        }
    }
}
