use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::{batches, Corpus, Split};
use crate::eval::{evaluate, EvalSet};
use crate::model::{Model, ModelConfig};
use crate::schedule::{default_k_train_set, SparsitySchedule};
use crate::tensor::Scalar;

use super::checkpoint::{save_checkpoint, CheckpointMeta};
use super::select::{select_checkpoint, CheckpointRecord, KMetrics, SelectionRule};
use super::{train_step, AdamW, StepLosses, TrainConfig, TrainError};

/// Fine-tuning regime.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Regime {
    /// Fixed at the base model's `k_pre`. `k`, when given, must equal it.
    Oracle { k: Option<usize> },
    /// Fixed at `k < k_pre`. `from`, when given, must equal `k_pre`.
    Naive { k: usize, from: Option<usize> },
    /// Sampled from a set, optionally annealed toward an anchor. An empty
    /// set means the default `{⌈k_pre/2⌉..k_pre}`.
    Phds {
        k_train_set: Vec<usize>,
        anchor: Option<usize>,
    },
}

fn parse_k(s: &str, whole: &str) -> Result<usize, TrainError> {
    s.trim()
        .parse()
        .map_err(|_| TrainError::Config(format!("bad k value {s:?} in regime {whole:?}")))
}

fn parse_set(s: &str, whole: &str) -> Result<Vec<usize>, TrainError> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| TrainError::Config(format!("expected [a,b,...] in regime {whole:?}")))?;
    inner.split(',').map(|p| parse_k(p, whole)).collect()
}

impl FromStr for Regime {
    type Err = TrainError;

    /// Accepts `oracle`, `oracle(4)`, `naive(2)`, `4->2`, `4→2`, `phds`,
    /// `phds [2,3,4] -> 2`, `[2,3,4]→2` and `[2,3,4]`.
    fn from_str(raw: &str) -> Result<Self, TrainError> {
        let s = raw.trim().replace('→', "->").to_ascii_lowercase();
        let call = |name: &str| -> Option<&str> {
            s.strip_prefix(name)?
                .trim()
                .strip_prefix('(')?
                .strip_suffix(')')
        };
        if s == "oracle" {
            return Ok(Regime::Oracle { k: None });
        }
        if let Some(arg) = call("oracle") {
            return Ok(Regime::Oracle {
                k: Some(parse_k(arg, raw)?),
            });
        }
        if let Some(arg) = call("naive") {
            return Ok(Regime::Naive {
                k: parse_k(arg, raw)?,
                from: None,
            });
        }
        let body = s.strip_prefix("phds").map(str::trim).unwrap_or(&s);
        if body.is_empty() {
            return Ok(Regime::Phds {
                k_train_set: Vec::new(),
                anchor: None,
            });
        }
        let (lhs, rhs) = match body.split_once("->") {
            Some((l, r)) => (l.trim(), Some(r.trim())),
            None => (body, None),
        };
        if lhs.starts_with('[') {
            let k_train_set = parse_set(lhs, raw)?;
            let anchor = rhs.map(|r| parse_k(r, raw)).transpose()?;
            return Ok(Regime::Phds {
                k_train_set,
                anchor,
            });
        }
        match rhs {
            Some(r) if !s.starts_with("phds") => {
                let from = parse_k(lhs, raw)?;
                let k = parse_k(r, raw)?;
                if from == k {
                    Ok(Regime::Oracle { k: Some(k) })
                } else {
                    Ok(Regime::Naive {
                        k,
                        from: Some(from),
                    })
                }
            }
            _ => Err(TrainError::Config(format!("unrecognized regime {raw:?}"))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Oracle { .. } => write!(f, "oracle"),
            Regime::Naive { k, .. } => write!(f, "naive({k})"),
            Regime::Phds {
                k_train_set,
                anchor,
            } => {
                let set = k_train_set
                    .iter()
                    .map(|k| k.to_string())
                    .collect::<Vec<_>>()
                    .join(",");
                match anchor {
                    Some(a) => write!(f, "phds [{set}]->{a}"),
                    None => write!(f, "phds [{set}]"),
                }
            }
        }
    }
}

impl Regime {
    /// The sampling schedule this regime implies for a base model with `k_pre`.
    pub fn schedule(
        &self,
        k_pre: usize,
        anneal_start: u64,
        anneal_ramp: u64,
    ) -> Result<SparsitySchedule, TrainError> {
        match self {
            Regime::Oracle { k } => {
                if let Some(k) = k.filter(|&k| k != k_pre) {
                    return Err(TrainError::Config(format!(
                        "oracle regime must train at k_pre={k_pre}, got k={k}"
                    )));
                }
                Ok(SparsitySchedule::fixed(k_pre, k_pre)?)
            }
            Regime::Naive { k, from } => {
                if let Some(from) = from.filter(|&f| f != k_pre) {
                    return Err(TrainError::Config(format!(
                        "regime starts from k={from} but the base has k_pre={k_pre}"
                    )));
                }
                if *k >= k_pre {
                    return Err(TrainError::Config(format!(
                        "naive regime needs k < k_pre={k_pre}, got {k}"
                    )));
                }
                Ok(SparsitySchedule::fixed(*k, k_pre)?)
            }
            Regime::Phds {
                k_train_set,
                anchor,
            } => {
                let set = if k_train_set.is_empty() {
                    default_k_train_set(k_pre)?
                } else {
                    k_train_set.clone()
                };
                Ok(SparsitySchedule::new(
                    set,
                    *anchor,
                    anneal_start,
                    anneal_ramp,
                    k_pre,
                )?)
            }
        }
    }
}

/// Optional evaluation, selection and persistence around a training run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub eval: Option<&'a EvalSet>,
    /// Sparsity levels evaluated at each checkpoint.
    pub eval_ks: Vec<usize>,
    /// Without a rule the final model is returned.
    pub selection: Option<SelectionRule>,
    /// Where to write one checkpoint file per evaluation.
    pub out_dir: Option<&'a Path>,
    pub regime: Option<String>,
    pub on_step: Option<Box<dyn FnMut(&StepLosses) + 'a>>,
}

pub struct RunOutput<T> {
    pub model: Model<T>,
    pub meta: CheckpointMeta,
    pub records: Vec<CheckpointRecord>,
    pub losses: Vec<StepLosses>,
}

/// Trains `model` for `cfg.total_steps` steps, drawing `k` from the schedule
/// each step and cycling through epochs of shuffled batches.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut hooks: TrainHooks<'_>,
) -> Result<RunOutput<T>, TrainError> {
    cfg.validate()?;
    if cfg.schedule.k_pre != model.config.k_pre {
        return Err(TrainError::Config(format!(
            "schedule k_pre {} differs from model k_pre {}",
            cfg.schedule.k_pre, model.config.k_pre
        )));
    }
    if cfg.seq_len > model.config.context_len {
        return Err(TrainError::Config(format!(
            "seq_len {} exceeds context_len {}",
            cfg.seq_len, model.config.context_len
        )));
    }
    if hooks.selection.is_some() && (hooks.eval.is_none() || hooks.eval_ks.is_empty()) {
        return Err(TrainError::Config(
            "checkpoint selection needs an evaluation set and k values".into(),
        ));
    }
    let mut opt = AdamW::<T>::new(
        cfg.learning_rate,
        cfg.betas,
        cfg.weight_decay,
        cfg.grad_clip,
    );
    let mut epoch = 0;
    let mut it = batches(
        corpus,
        Split::Train,
        cfg.seq_len,
        cfg.batch_size,
        cfg.seed,
        epoch,
    )?;
    if it.is_empty() {
        return Err(TrainError::Config(
            "training split is smaller than one batch".into(),
        ));
    }
    let mut losses = Vec::with_capacity(cfg.total_steps as usize);
    let mut records = Vec::new();
    let mut snapshots: Vec<(Model<T>, CheckpointMeta)> = Vec::new();
    let make_meta = |model: &Model<T>, step: u64| {
        let mut meta = CheckpointMeta::new(model, step, cfg.seed);
        meta.schedule = Some(cfg.schedule.clone());
        meta.regime = hooks.regime.clone();
        meta
    };
    for step in 0..cfg.total_steps {
        let batch = match it.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                it = batches(
                    corpus,
                    Split::Train,
                    cfg.seq_len,
                    cfg.batch_size,
                    cfg.seed,
                    epoch,
                )?;
                it.next().expect("non-empty epoch")
            }
        };
        let k = cfg.schedule.sample_k(step, cfg.seed)?;
        let l = train_step(&mut model, &mut opt, &batch, k, cfg, step)?;
        if let Some(f) = hooks.on_step.as_mut() {
            f(&l);
        }
        losses.push(l);
        let done = step + 1;
        let (Some(set), true) = (
            hooks.eval,
            done % cfg.eval_every == 0 || done == cfg.total_steps,
        ) else {
            continue;
        };
        if hooks.eval_ks.is_empty() {
            continue;
        }
        let mut metrics = std::collections::BTreeMap::new();
        for &k in &hooks.eval_ks {
            let r = evaluate(&model, set, k, false)?;
            metrics.insert(
                k,
                KMetrics {
                    perplexity: r.perplexity,
                    mc_accuracy: r.mc_accuracy,
                },
            );
        }
        let mut meta = make_meta(&model, done);
        meta.metrics = metrics.clone();
        let path = match hooks.out_dir {
            Some(dir) => {
                let p = dir.join(format!("step_{done:06}.phds"));
                save_checkpoint(&model, &meta, &p)?;
                Some(p)
            }
            None => None,
        };
        records.push(CheckpointRecord {
            step: done,
            metrics,
            path,
        });
        if hooks.selection.is_some() {
            snapshots.push((model.clone(), meta));
        }
    }
    let (model, meta) = match &hooks.selection {
        Some(rule) => {
            let chosen = select_checkpoint(&records, rule, cfg.burn_in_steps)?.step;
            snapshots
                .into_iter()
                .find(|(_, m)| m.step == chosen)
                .expect("a snapshot exists for every record")
        }
        None => {
            let mut meta = make_meta(&model, cfg.total_steps);
            if let Some(r) = records.last().filter(|r| r.step == cfg.total_steps) {
                meta.metrics = r.metrics.clone();
            }
            (model, meta)
        }
    };
    Ok(RunOutput {
        model,
        meta,
        records,
        losses,
    })
}

/// Trains a fresh model at fixed `k_pre`, then copies its post-MoE norms to
/// every banked `k` so fine-tuning at any `k` starts from the same values.
pub fn pretrain<T: Scalar>(
    config: ModelConfig,
    corpus: &Corpus,
    cfg: &TrainConfig,
    hooks: TrainHooks<'_>,
) -> Result<RunOutput<T>, TrainError> {
    config.validate()?;
    if cfg.schedule.k_train_set != [config.k_pre] {
        return Err(TrainError::Config(format!(
            "pretraining runs at fixed k_pre={}, schedule has {:?}",
            config.k_pre, cfg.schedule.k_train_set
        )));
    }
    let model = Model::<T>::init(config, cfg.seed)?;
    let mut out = train(model, corpus, cfg, hooks)?;
    let k_pre = out.model.config.k_pre;
    out.model.aux.broadcast_norms_from(k_pre)?;
    Ok(out)
}
