use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the toy vision-language model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Zero gives an embedding-only model (useful as an ablation).
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_hidden_dim: usize,
    /// Maximum positions, including the vision prefix slot.
    pub context_length: usize,
    /// Width of the raw feature vectors fed to the vision stub.
    pub vision_feature_dim: usize,
    /// Output width of the vision stub, i.e. the projector's input width.
    pub vision_stub_dim: usize,
    /// Gate/up/down MLP when true, up/down otherwise.
    pub gated_mlp: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_hidden_dim: 128,
            context_length: 256,
            vision_feature_dim: 32,
            vision_stub_dim: 48,
            gated_mlp: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("mlp_hidden_dim", self.mlp_hidden_dim),
            ("context_length", self.context_length),
            ("vision_feature_dim", self.vision_feature_dim),
            ("vision_stub_dim", self.vision_stub_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "num_heads",
                format!("{} does not divide embed_dim {}", self.num_heads, self.embed_dim),
            ));
        }
        Ok(())
    }

    /// `(in, out)` extents of the projector.
    pub fn projector_dims(&self) -> (usize, usize) {
        (self.vision_stub_dim, self.embed_dim)
    }

    /// Parameters of one transformer block, norms included.
    pub fn block_parameter_count(&self) -> usize {
        let d = self.embed_dim;
        let h = self.mlp_hidden_dim;
        let mlp_mats = if self.gated_mlp { 3 } else { 2 };
        4 * d * d + mlp_mats * d * h + 2 * d
    }

    /// Trainable-candidate parameters: everything except the fixed vision stub.
    pub fn parameter_count(&self) -> usize {
        let d = self.embed_dim;
        let v = self.vocab_size;
        2 * v * d + self.context_length * d + d + self.vision_stub_dim * d + self.num_layers * self.block_parameter_count()
    }
}
