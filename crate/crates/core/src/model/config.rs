use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterNorm {
    /// Softmax over all experts, top-k kept without renormalization.
    UnnormalizedTopkSoftmax,
    /// Masked probabilities renormalized to sum to one.
    NormalizedSoftmaxK,
}

/// Architecture and router hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub d_expert: usize,
    pub k_pre: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_router_norm")]
    pub router_norm: RouterNorm,
    pub vocab_size: usize,
    pub context_len: usize,
    #[serde(default = "default_ffn_matrices")]
    pub ffn_matrices_per_expert: usize,
    /// Learned absolute position table of `context_len × d_model`.
    #[serde(default = "yes")]
    pub learned_positions: bool,
    /// Output projection shares the token embedding table.
    #[serde(default = "yes")]
    pub tie_embeddings: bool,
}

fn default_epsilon() -> f64 {
    1e-6
}

fn default_router_norm() -> RouterNorm {
    RouterNorm::UnnormalizedTopkSoftmax
}

fn default_ffn_matrices() -> usize {
    3
}

fn yes() -> bool {
    true
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.n_experts == 0 || self.d_expert == 0 {
            return bad("n_layers, d_model, n_experts and d_expert must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.k_pre == 0 || self.k_pre > self.n_experts {
            return bad(format!(
                "k_pre {} must be in 1..={}",
                self.k_pre, self.n_experts
            ));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {} must be finite and >= 0", self.epsilon));
        }
        if !matches!(self.ffn_matrices_per_expert, 2 | 3) {
            return bad(format!(
                "ffn_matrices_per_expert must be 2 or 3, got {}",
                self.ffn_matrices_per_expert
            ));
        }
        if self.vocab_size == 0 || self.context_len == 0 {
            return bad("vocab_size and context_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total routed FFN width of one layer.
    pub fn layer_ffn_width(&self) -> usize {
        self.d_expert * self.n_experts
    }

    /// The 24-layer, 16-expert internal baseline family. The embedding is a
    /// tied 24,576-token table with no learned position table; attention
    /// projections are bias-free.
    pub fn internal_baseline(k_pre: usize) -> Self {
        Self {
            n_layers: 24,
            d_model: 1024,
            n_heads: 16,
            n_experts: 16,
            d_expert: 768,
            k_pre,
            epsilon: 1e-6,
            router_norm: RouterNorm::UnnormalizedTopkSoftmax,
            vocab_size: 24_576,
            context_len: 4096,
            ffn_matrices_per_expert: 3,
            learned_positions: false,
            tie_embeddings: true,
        }
    }

    /// Desk-scale model: 4 layers, d_model 64, 8 experts, k_pre 4.
    pub fn toy(k_pre: usize) -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            n_experts: 8,
            d_expert: 192,
            k_pre,
            epsilon: 1e-6,
            router_norm: RouterNorm::UnnormalizedTopkSoftmax,
            vocab_size: crate::data::VOCAB_SIZE,
            context_len: 64,
            ffn_matrices_per_expert: 3,
            learned_positions: true,
            tie_embeddings: true,
        }
    }
}
