//! Model hyperparameters.

use core::fmt;

/// Architecture description for an L-layer pre-LN GLU transformer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Number of transformer layers.
    pub n_layers: usize,
    /// Residual stream width d.
    pub d_model: usize,
    /// Attention head count; must divide `d_model`.
    pub n_heads: usize,
    /// GLU hidden width.
    pub d_ff: usize,
    /// Vocabulary size.
    pub vocab_size: usize,
    /// Maximum sequence length accepted by the forward pass.
    pub max_seq: usize,
    /// RMSNorm epsilon.
    pub rms_eps: f32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("{0} must be at least 1")]
    ZeroField(&'static str),
    #[error("d_model {d_model} is not divisible by n_heads {n_heads}")]
    HeadSplit { d_model: usize, n_heads: usize },
    #[error("rms_eps must be positive, got {0}")]
    NonPositiveEps(f32),
}

impl ModelConfig {
    /// Default epsilon used when a config leaves it unspecified.
    pub const DEFAULT_RMS_EPS: f32 = 1e-6;

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(ConfigError::ZeroField(name));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ConfigError::HeadSplit {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        if !(self.rms_eps > 0.0) {
            return Err(ConfigError::NonPositiveEps(self.rms_eps));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L={} d={} heads={} d_ff={} V={} T_max={} eps={}",
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_ff,
            self.vocab_size,
            self.max_seq,
            self.rms_eps
        )
    }
}
