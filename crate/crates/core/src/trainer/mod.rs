//! Optimization at a sampled sparsity level, parameter freezing, checkpoint
//! selection and the binary checkpoint format.

pub mod checkpoint;
mod optim;
mod run;
mod select;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::data::{Batch, DataError};
use crate::eval::EvalError;
use crate::model::{Binder, Model, ModelError, Sparsity};
use crate::schedule::{ScheduleError, SparsitySchedule};
use crate::tensor::{Scalar, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta, RngState};
pub use optim::AdamW;
pub use run::{pretrain, train, Regime, RunOutput, TrainHooks};
pub use select::{select_checkpoint, CheckpointRecord, KMetrics, SelectionRule};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite {what} at step {step}, k={k}, batch {batch:?}")]
    NonFinite {
        what: String,
        step: u64,
        k: usize,
        batch: (u64, usize),
    },
    #[error("checkpoint selection: {0}")]
    Selection(String),
}

/// Which parameters a fine-tuning run may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeSubset {
    #[default]
    None,
    GateOnly,
    ExpertOnly,
    AttentionOnly,
    ExpertAndGate,
}

impl FreezeSubset {
    pub const ALL: [FreezeSubset; 5] = [
        FreezeSubset::None,
        FreezeSubset::GateOnly,
        FreezeSubset::ExpertOnly,
        FreezeSubset::AttentionOnly,
        FreezeSubset::ExpertAndGate,
    ];

    pub fn is_trainable(self, name: &str) -> bool {
        let router = name.ends_with(".router");
        let expert = name.contains(".experts.");
        let attention = name.ends_with(".wqkv") || name.ends_with(".wo");
        match self {
            FreezeSubset::None => true,
            FreezeSubset::GateOnly => router,
            FreezeSubset::ExpertOnly => expert,
            FreezeSubset::AttentionOnly => attention,
            FreezeSubset::ExpertAndGate => expert || router,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FreezeSubset::None => "none",
            FreezeSubset::GateOnly => "gate_only",
            FreezeSubset::ExpertOnly => "expert_only",
            FreezeSubset::AttentionOnly => "attention_only",
            FreezeSubset::ExpertAndGate => "expert_and_gate",
        }
    }
}

impl fmt::Display for FreezeSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FreezeSubset {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        FreezeSubset::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown freeze subset {s:?}")))
    }
}

/// Trainable and frozen tensor names with their element counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPartition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub trainable_count: usize,
    pub frozen_count: usize,
}

pub fn apply_freeze_mask<T: Scalar>(model: &Model<T>, subset: FreezeSubset) -> ParamPartition {
    let mut p = ParamPartition {
        trainable: Vec::new(),
        frozen: Vec::new(),
        trainable_count: 0,
        frozen_count: 0,
    };
    model.visit(|name, t| {
        if subset.is_trainable(name) {
            p.trainable.push(name.to_string());
            p.trainable_count += t.numel();
        } else {
            p.frozen.push(name.to_string());
            p.frozen_count += t.numel();
        }
    });
    p
}

fn default_lb() -> f64 {
    0.01
}
fn default_lr() -> f64 {
    3e-4
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.95]
}
fn default_wd() -> f64 {
    0.1
}
fn default_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: SparsitySchedule,
    #[serde(default = "default_lb")]
    pub lb_coefficient: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    pub total_steps: u64,
    pub eval_every: u64,
    #[serde(default)]
    pub burn_in_steps: u64,
    #[serde(default)]
    pub freeze_subset: FreezeSubset,
    pub seed: u64,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl TrainConfig {
    /// Optimizer defaults with the given schedule and budget.
    pub fn new(
        schedule: SparsitySchedule,
        total_steps: u64,
        batch_size: usize,
        seq_len: usize,
        seed: u64,
    ) -> Self {
        Self {
            schedule,
            lb_coefficient: default_lb(),
            learning_rate: default_lr(),
            betas: default_betas(),
            weight_decay: default_wd(),
            grad_clip: default_clip(),
            total_steps,
            eval_every: total_steps.max(1),
            burn_in_steps: 0,
            freeze_subset: FreezeSubset::None,
            seed,
            batch_size,
            seq_len,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.schedule.validate()?;
        if self.total_steps == 0 || self.eval_every == 0 {
            return bad("total_steps and eval_every must be positive".into());
        }
        if self.burn_in_steps >= self.total_steps {
            return bad(format!(
                "burn_in_steps {} must be below total_steps {}",
                self.burn_in_steps, self.total_steps
            ));
        }
        if !(self.lb_coefficient >= 0.0 && self.lb_coefficient.is_finite()) {
            return bad(format!(
                "lb_coefficient {} must be finite and >= 0",
                self.lb_coefficient
            ));
        }
        if !(self.learning_rate > 0.0) || self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("learning_rate must be > 0 and betas in [0, 1)".into());
        }
        if self.weight_decay < 0.0 || !(self.grad_clip > 0.0) {
            return bad("weight_decay must be >= 0 and grad_clip > 0".into());
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLosses {
    pub step: u64,
    pub k: usize,
    pub lm_loss: f64,
    pub lb_loss: f64,
    pub total_loss: f64,
}

/// One optimizer step at sparsity `k` on `batch`.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batch: &Batch,
    k: usize,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepLosses, TrainError> {
    let non_finite = |what: &str| TrainError::NonFinite {
        what: what.to_string(),
        step,
        k,
        batch: batch.id,
    };
    let lift = |e: ModelError| match e {
        ModelError::Tensor(TensorError::NonFinite { op }) => non_finite(op),
        other => TrainError::Model(other),
    };
    let sp = Sparsity::resolve(model, k, false)?;
    let subset = cfg.freeze_subset;
    let mut g = Graph::<T>::new();
    let mut b = Binder::new(move |n: &str| subset.is_trainable(n));
    let fwd = model
        .forward(
            &mut g,
            &mut b,
            &batch.inputs,
            batch.batch_size,
            batch.seq_len,
            sp,
        )
        .map_err(lift)?;
    let lm = g
        .cross_entropy(fwd.logits, &batch.targets)
        .map_err(|e| lift(e.into()))?;
    let total = if cfg.lb_coefficient == 0.0 {
        lm
    } else {
        let scaled = g
            .scale(fwd.lb_loss, T::of(cfg.lb_coefficient))
            .map_err(|e| lift(e.into()))?;
        g.add(lm, scaled).map_err(|e| lift(e.into()))?
    };
    let losses = StepLosses {
        step,
        k,
        lm_loss: g.value(lm).item().as_f64(),
        lb_loss: g.value(fwd.lb_loss).item().as_f64(),
        total_loss: g.value(total).item().as_f64(),
    };
    if !losses.total_loss.is_finite() {
        return Err(non_finite("loss"));
    }
    let mut grads = g.backward(total).map_err(|e| lift(e.into()))?;
    let mut named = BTreeMap::new();
    for (name, &v) in b.bound() {
        if g.requires_grad(v) {
            if let Some(gr) = grads.take(v) {
                if !gr.is_finite() {
                    return Err(non_finite(&format!("gradient of {name}")));
                }
                named.insert(name.clone(), gr);
            }
        }
    }
    opt.step(model, &named);
    model.aux.get_mut(k)?.lb.record(&fwd.routing);
    Ok(losses)
}
