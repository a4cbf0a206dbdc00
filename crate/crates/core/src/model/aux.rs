//! State that is banked per declared sparsity level: the normalization after
//! each MoE block and the load-balance statistics.

use std::collections::BTreeMap;

use crate::tensor::{Scalar, Tensor};

use super::{ModelConfig, ModelError, Norm};

/// Running load-balance statistics for one `k`, per layer and expert.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadBalanceStats {
    pub n_layers: usize,
    pub n_experts: usize,
    /// Sum over recorded batches of assignment fractions `f_i`, `[L×E]`.
    pub f_sum: Vec<f64>,
    /// Sum over recorded batches of mean probabilities `P_i`, `[L×E]`.
    pub p_sum: Vec<f64>,
    pub batches: u64,
}

impl LoadBalanceStats {
    pub fn new(n_layers: usize, n_experts: usize) -> Self {
        Self {
            n_layers,
            n_experts,
            f_sum: vec![0.0; n_layers * n_experts],
            p_sum: vec![0.0; n_layers * n_experts],
            batches: 0,
        }
    }

    /// Adds one batch worth of per-layer `(f, P)` vectors.
    pub fn record(&mut self, per_layer: &[(Vec<f64>, Vec<f64>)]) {
        for (l, (f, p)) in per_layer.iter().enumerate() {
            let base = l * self.n_experts;
            for i in 0..self.n_experts {
                self.f_sum[base + i] += f[i];
                self.p_sum[base + i] += p[i];
            }
        }
        self.batches += 1;
    }

    /// `E · Σ_i f̄_i · P̄_i` averaged over layers, using the running means.
    pub fn mean_loss(&self) -> Option<f64> {
        if self.batches == 0 {
            return None;
        }
        let n = self.batches as f64;
        let e = self.n_experts as f64;
        let total: f64 = (0..self.n_layers)
            .map(|l| {
                let base = l * self.n_experts;
                (0..self.n_experts)
                    .map(|i| (self.f_sum[base + i] / n) * (self.p_sum[base + i] / n))
                    .sum::<f64>()
                    * e
            })
            .sum();
        Some(total / self.n_layers as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KAux<T = f32> {
    /// Normalization applied to each layer's MoE output.
    pub post_norms: Vec<Norm<T>>,
    pub lb: LoadBalanceStats,
}

impl<T: Scalar> KAux<T> {
    fn new(config: &ModelConfig) -> Self {
        Self {
            post_norms: (0..config.n_layers)
                .map(|_| Norm::identity(config.d_model))
                .collect(),
            lb: LoadBalanceStats::new(config.n_layers, config.n_experts),
        }
    }
}

/// Map from declared `k` to its own normalization parameters and
/// load-balance accumulator. Entries own their storage.
#[derive(Debug, Clone, PartialEq)]
pub struct KAuxBank<T = f32> {
    entries: BTreeMap<usize, KAux<T>>,
}

impl<T: Scalar> KAuxBank<T> {
    pub fn new(config: &ModelConfig, ks: impl IntoIterator<Item = usize>) -> Self {
        let entries = ks.into_iter().map(|k| (k, KAux::new(config))).collect();
        Self { entries }
    }

    /// One entry for every `k` in `1..=k_pre`.
    pub fn for_config(config: &ModelConfig) -> Self {
        Self::new(config, 1..=config.k_pre)
    }

    pub fn ks(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn contains(&self, k: usize) -> bool {
        self.entries.contains_key(&k)
    }

    pub fn get(&self, k: usize) -> Result<&KAux<T>, ModelError> {
        self.entries.get(&k).ok_or(ModelError::MissingAuxEntry(k))
    }

    pub fn get_mut(&mut self, k: usize) -> Result<&mut KAux<T>, ModelError> {
        self.entries
            .get_mut(&k)
            .ok_or(ModelError::MissingAuxEntry(k))
    }

    pub fn insert(&mut self, k: usize, entry: KAux<T>) {
        self.entries.insert(k, entry);
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &KAux<T>)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (usize, &mut KAux<T>)> {
        self.entries.iter_mut().map(|(k, v)| (*k, v))
    }

    /// Copies the normalization parameters of `source` into every other
    /// entry. Load-balance statistics are reset everywhere but `source`.
    pub fn broadcast_norms_from(&mut self, source: usize) -> Result<(), ModelError> {
        let norms = self.get(source)?.post_norms.clone();
        for (k, entry) in self.entries.iter_mut() {
            if *k != source {
                entry.post_norms = norms.clone();
                entry.lb = LoadBalanceStats::new(entry.lb.n_layers, entry.lb.n_experts);
            }
        }
        Ok(())
    }

    pub(crate) fn map<U: Scalar>(&self, f: &impl Fn(&Tensor<T>) -> Tensor<U>) -> KAuxBank<U> {
        KAuxBank {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    let entry = KAux {
                        post_norms: e.post_norms.iter().map(|n| n.map(f)).collect(),
                        lb: e.lb.clone(),
                    };
                    (*k, entry)
                })
                .collect(),
        }
    }
}
