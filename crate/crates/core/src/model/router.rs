//! Top-k routing with the soft mask used for runtime-declared sparsity.
//!
//! Given raw gate probabilities `p`, an expert keeps `p_j` when it is in the
//! top-`k_train` set, gets a constant `ε` when it is in the top-`k_pre` set but
//! not the top-`k_train` set, and is zero otherwise. Normalized routers then
//! divide each row by its masked sum.

use crate::autodiff::{GateKind, Graph};
use crate::tensor::{matmul, softmax, top_k_indices, Scalar, Tensor};

use super::{ModelConfig, ModelError, RouterNorm};

#[derive(Debug, Clone, PartialEq)]
pub struct RouterDecision<T = f32> {
    /// Raw gate probabilities `[T×E]`.
    pub probs: Tensor<T>,
    /// Top-`k_pre` experts per token, by descending probability.
    pub topk_pre: Vec<Vec<usize>>,
    /// Top-`k_train` experts per token; always a prefix of `topk_pre`.
    pub topk_train: Vec<Vec<usize>>,
    /// Masked gate weights `[T×E]`.
    pub gates: Tensor<T>,
}

/// Checks `1 ≤ k_train ≤ k_pre ≤ n_experts`.
pub fn check_sparsity(k_train: usize, k_pre: usize, n_experts: usize) -> Result<(), ModelError> {
    if k_train < 1 {
        return Err(ModelError::Domain(format!("k must be >= 1, got {k_train}")));
    }
    if k_pre > n_experts {
        return Err(ModelError::Domain(format!(
            "k_pre {k_pre} exceeds {n_experts} experts"
        )));
    }
    if k_train > k_pre {
        return Err(ModelError::SparsityMisspecified { k: k_train, k_pre });
    }
    Ok(())
}

/// Per-entry gate kinds plus the selected index sets.
pub(crate) fn gate_kinds<T: Scalar>(
    probs: &Tensor<T>,
    k_pre: usize,
    k_train: usize,
) -> Result<(Vec<GateKind>, Vec<Vec<usize>>, Vec<Vec<usize>>), ModelError> {
    let (rows, cols) = probs.dims2("route")?;
    check_sparsity(k_train, k_pre, cols)?;
    let mut kinds = vec![GateKind::Dropped; rows * cols];
    let mut pre = Vec::with_capacity(rows);
    let mut train = Vec::with_capacity(rows);
    for r in 0..rows {
        let top = top_k_indices(probs.row(r), k_pre)?;
        for (rank, &j) in top.iter().enumerate() {
            kinds[r * cols + j] = if rank < k_train {
                GateKind::Kept
            } else {
                GateKind::Epsilon
            };
        }
        train.push(top[..k_train].to_vec());
        pre.push(top);
    }
    Ok((kinds, pre, train))
}

/// Applies the soft mask to precomputed probabilities.
pub fn soft_mask<T: Scalar>(
    probs: &Tensor<T>,
    k_pre: usize,
    k_train: usize,
    epsilon: f64,
    norm: RouterNorm,
) -> Result<RouterDecision<T>, ModelError> {
    let (kinds, topk_pre, topk_train) = gate_kinds(probs, k_pre, k_train)?;
    // Same code path as the differentiable op, so values match bitwise.
    let mut g = Graph::<T>::new();
    let p = g.constant(probs.clone());
    let gates = g.soft_mask(
        p,
        kinds,
        T::of(epsilon),
        norm == RouterNorm::NormalizedSoftmaxK,
    )?;
    Ok(RouterDecision {
        probs: probs.clone(),
        topk_pre,
        topk_train,
        gates: g.value(gates).clone(),
    })
}

/// Routes hidden states `h [T×d]` through router weights `w_r [d×E]`.
pub fn route<T: Scalar>(
    h: &Tensor<T>,
    w_r: &Tensor<T>,
    k_train: usize,
    config: &ModelConfig,
) -> Result<RouterDecision<T>, ModelError> {
    check_sparsity(k_train, config.k_pre, config.n_experts)?;
    let logits = matmul(h, w_r)?;
    let probs = softmax(&logits, 1)?;
    soft_mask(
        &probs,
        config.k_pre,
        k_train,
        config.epsilon,
        config.router_norm,
    )
}

/// Fraction of top-`k` assignments per expert, `count_i / (T·k)`.
pub fn assignment_fractions(
    topk: &[Vec<usize>],
    n_experts: usize,
    k: usize,
) -> Result<Vec<f64>, ModelError> {
    if topk.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut f = vec![0.0; n_experts];
    for set in topk {
        for &j in set {
            f[j] += 1.0;
        }
    }
    let denom = (topk.len() * k) as f64;
    Ok(f.into_iter().map(|c| c / denom).collect())
}

/// Mean gate probability per expert.
pub fn mean_probs<T: Scalar>(probs: &Tensor<T>) -> Result<Vec<f64>, ModelError> {
    let (rows, cols) = probs.dims2("load_balance")?;
    if rows == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let mut p = vec![0.0; cols];
    for r in 0..rows {
        for (acc, v) in p.iter_mut().zip(probs.row(r)) {
            *acc += v.as_f64();
        }
    }
    Ok(p.into_iter().map(|s| s / rows as f64).collect())
}

/// `E · Σ_i f_i · P_i` over the top-`k` assignments of `decision`.
pub fn load_balance_loss<T: Scalar>(
    decision: &RouterDecision<T>,
    k: usize,
) -> Result<f64, ModelError> {
    let (_, n_experts) = decision.probs.dims2("load_balance")?;
    let f = assignment_fractions(&decision.topk_train, n_experts, k)?;
    let p = mean_probs(&decision.probs)?;
    Ok(n_experts as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>())
}
