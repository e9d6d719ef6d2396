use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Dtype;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Number of transformer blocks between the embedding and the LM head.
    pub n_blocks: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub dtype: Dtype,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_blocks", self.n_blocks),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_width(&self) -> usize {
        4 * self.d_model
    }

    /// Total number of parameter blocks (embedding + transformer blocks + head).
    pub fn block_count(&self) -> usize {
        self.n_blocks + 2
    }

    pub fn head_block_id(&self) -> usize {
        self.n_blocks + 1
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Small default used by tests and `distzo verify`.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_blocks: 2,
            seq_len: 8,
            dtype: Dtype::F64,
        }
    }
}
