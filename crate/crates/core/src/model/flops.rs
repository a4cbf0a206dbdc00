//! Parameter and per-token FLOPs accounting at a given sparsity level.

use serde::Serialize;

use super::{ModelConfig, ModelError};

/// Parameter counts by component. Norm counts include one post-MoE norm per
/// layer, which is the set active for any single `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub embedding: u64,
    pub positions: u64,
    pub head: u64,
    pub attention: u64,
    pub router: u64,
    pub norms: u64,
    /// One expert's FFN parameters summed over all layers.
    pub expert_per_k: u64,
}

impl ParamBreakdown {
    /// Everything that is active regardless of `k`.
    pub fn non_expert(&self) -> u64 {
        self.embedding + self.positions + self.head + self.attention + self.router + self.norms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopsEstimate {
    pub k: usize,
    pub active_params: u64,
    pub flops_per_token: u64,
}

pub fn param_breakdown(config: &ModelConfig) -> ParamBreakdown {
    let l = config.n_layers as u64;
    let d = config.d_model as u64;
    let v = config.vocab_size as u64;
    let e = config.n_experts as u64;
    ParamBreakdown {
        embedding: v * d,
        positions: if config.learned_positions {
            config.context_len as u64 * d
        } else {
            0
        },
        head: if config.tie_embeddings { 0 } else { v * d },
        attention: l * 4 * d * d,
        router: l * d * e,
        norms: l * 6 * d + 2 * d,
        expert_per_k: l * config.ffn_matrices_per_expert as u64 * d * config.d_expert as u64,
    }
}

fn check_k(config: &ModelConfig, k: usize) -> Result<(), ModelError> {
    if k < 1 || k > config.n_experts {
        return Err(ModelError::Domain(format!(
            "k={k} outside 1..={}",
            config.n_experts
        )));
    }
    Ok(())
}

/// Parameters touched per token when `k` experts run in every layer.
pub fn active_params(config: &ModelConfig, k: usize) -> Result<u64, ModelError> {
    check_k(config, k)?;
    let p = param_breakdown(config);
    Ok(p.non_expert() + k as u64 * p.expert_per_k)
}

/// `2·active_params` for the matmuls plus `2·n_layers·context_len·d_model`
/// for attention scores and mixing at full context.
pub fn flops_per_token(config: &ModelConfig, k: usize) -> Result<FlopsEstimate, ModelError> {
    let active = active_params(config, k)?;
    let attn = 2 * config.n_layers as u64 * config.context_len as u64 * config.d_model as u64;
    Ok(FlopsEstimate {
        k,
        active_params: active,
        flops_per_token: 2 * active + attn,
    })
}

/// Parameters stored in a checkpoint: all experts plus one post-MoE norm set
/// per banked `k`.
pub fn total_params(config: &ModelConfig, banked_ks: usize) -> u64 {
    let p = param_breakdown(config);
    let post_norm = config.n_layers as u64 * 2 * config.d_model as u64;
    p.non_expert() - post_norm
        + banked_ks as u64 * post_norm
        + config.n_experts as u64 * p.expert_per_k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    #[test]
    fn stored_count_matches_model() {
        for (cfg, seed) in [(ModelConfig::toy(4), 1), (ModelConfig::toy(2), 2)] {
            let m = Model::<f32>::init(cfg.clone(), seed).unwrap();
            assert_eq!(total_params(&cfg, cfg.k_pre) as usize, m.param_count());
        }
    }

    #[test]
    fn active_params_step_is_one_expert() {
        let cfg = ModelConfig::toy(4);
        let step = param_breakdown(&cfg).expert_per_k;
        for k in 1..cfg.n_experts {
            assert_eq!(
                active_params(&cfg, k + 1).unwrap() - active_params(&cfg, k).unwrap(),
                step
            );
        }
        assert!(active_params(&cfg, 0).is_err());
        assert!(active_params(&cfg, 9).is_err());
    }
}
