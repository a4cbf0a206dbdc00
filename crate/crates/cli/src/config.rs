//! TOML run configuration. Every section except `[model]` and `[data]` may be
//! omitted. See the README for the full schema.

use std::path::{Path, PathBuf};

use phds_core::data::{
    eval_windows, make_mc_task, read_mc_jsonl, tokenize, Corpus, FactCorpus, McItem, McSpec, Split,
};
use phds_core::eval::EvalSet;
use phds_core::model::{ModelConfig, RouterNorm};
use phds_core::schedule::{default_k_train_set, SparsitySchedule};
use phds_core::trainer::{FreezeSubset, Regime, SelectionRule, TrainConfig};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "one")]
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub model: ModelSection,
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub sft: SftSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablate: AblateSection,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Toy,
    InternalBaseline,
}

/// A preset plus per-field overrides, or every required field spelled out.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<Preset>,
    pub n_layers: Option<usize>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_experts: Option<usize>,
    pub d_expert: Option<usize>,
    pub k_pre: Option<usize>,
    pub epsilon: Option<f64>,
    pub router_norm: Option<RouterNorm>,
    pub vocab_size: Option<usize>,
    pub context_len: Option<usize>,
    pub ffn_matrices_per_expert: Option<usize>,
    pub learned_positions: Option<bool>,
    pub tie_embeddings: Option<bool>,
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig, CliError> {
        let k_pre = self.k_pre.unwrap_or(4);
        let mut c = match self.preset {
            Some(Preset::Toy) => ModelConfig::toy(k_pre),
            Some(Preset::InternalBaseline) => ModelConfig::internal_baseline(k_pre),
            None => {
                let need = |v: Option<usize>, name: &str| {
                    v.ok_or_else(|| {
                        CliError::Validation(format!("model.{name} is required without a preset"))
                    })
                };
                ModelConfig {
                    n_layers: need(self.n_layers, "n_layers")?,
                    d_model: need(self.d_model, "d_model")?,
                    n_heads: need(self.n_heads, "n_heads")?,
                    n_experts: need(self.n_experts, "n_experts")?,
                    d_expert: need(self.d_expert, "d_expert")?,
                    k_pre: need(self.k_pre, "k_pre")?,
                    epsilon: 1e-6,
                    router_norm: RouterNorm::UnnormalizedTopkSoftmax,
                    vocab_size: self.vocab_size.unwrap_or(phds_core::data::VOCAB_SIZE),
                    context_len: need(self.context_len, "context_len")?,
                    ffn_matrices_per_expert: 3,
                    learned_positions: true,
                    tie_embeddings: true,
                }
            }
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(
            n_layers,
            d_model,
            n_heads,
            n_experts,
            d_expert,
            epsilon,
            router_norm,
            vocab_size,
            context_len,
            ffn_matrices_per_expert,
            learned_positions,
            tie_embeddings
        );
        c.validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactsSection {
    pub n_facts: usize,
    #[serde(default = "four")]
    pub key_len: usize,
    #[serde(default = "four")]
    pub value_len: usize,
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
}

fn four() -> usize {
    4
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Raw byte file; the last tenth is held out.
    pub corpus: Option<PathBuf>,
    /// Generated key:value facts instead of a file.
    pub facts: Option<FactsSection>,
    /// Separate text for SFT. Fact corpora default to a reshuffled layout of
    /// the same facts; file corpora default to the pretraining text.
    pub sft_corpus: Option<PathBuf>,
    /// Multiple-choice items as JSON lines; generated when absent.
    pub mc_items: Option<PathBuf>,
    #[serde(default = "mc_count")]
    pub mc_count: usize,
    #[serde(default = "four")]
    pub mc_options: usize,
    #[serde(default = "eleven")]
    pub mc_seed: u64,
    #[serde(default = "seq_len")]
    pub seq_len: usize,
    #[serde(default = "batch_size")]
    pub batch_size: usize,
    #[serde(default = "eval_windows_default")]
    pub eval_windows: usize,
    #[serde(default = "eval_batch")]
    pub eval_batch: usize,
}

fn mc_count() -> usize {
    1000
}
fn eleven() -> u64 {
    11
}
fn seq_len() -> usize {
    32
}
fn batch_size() -> usize {
    16
}
fn eval_windows_default() -> usize {
    32
}
fn eval_batch() -> usize {
    64
}

/// Optimizer settings shared by all training commands. Token budgets are
/// converted to steps as `tokens / (batch_size · seq_len)`.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Budget of an `sft` run.
    pub initial_tokens: u64,
    /// Budget of each run inside `ablate`.
    pub ablation_tokens: u64,
    /// Load-balance loss coefficient.
    pub lb: f64,
    pub learning_rate: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub eval_every: u64,
    pub burn_in_steps: u64,
    pub freeze_subset: FreezeSubset,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            initial_tokens: 512_000,
            ablation_tokens: 256_000,
            lb: 0.01,
            learning_rate: 3e-4,
            betas: [0.9, 0.95],
            weight_decay: 0.1,
            grad_clip: 1.0,
            eval_every: 250,
            burn_in_steps: 0,
            freeze_subset: FreezeSubset::None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub tokens: u64,
    /// Overrides `train.learning_rate`.
    pub learning_rate: Option<f64>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            tokens: 1_024_000,
            learning_rate: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftSection {
    /// `oracle`, `naive(k)`, `4->2`, `phds`, `phds [2,3,4] -> 2`, `[2,3,4]→2`.
    pub regime: String,
    /// Anchoring starts after this fraction of the steps.
    pub anneal_start: f64,
    /// Length of the linear ramp to the anchor, as a fraction of the steps.
    pub anneal_ramp: f64,
    /// `best_at_k:K` or `best_avg:K1,K2,...`; defaults to `best_at_k:k_pre`.
    pub selection: Option<String>,
    /// Evaluated at every checkpoint; defaults to the training set plus `k_pre`.
    pub eval_ks: Option<Vec<usize>>,
}

impl Default for SftSection {
    fn default() -> Self {
        Self {
            regime: "oracle".into(),
            anneal_start: 0.5,
            anneal_ramp: 0.0,
            selection: None,
            eval_ks: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub k_list: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub epsilons: Option<Vec<f64>>,
    pub ktrain_sets: Option<Vec<Vec<usize>>>,
    /// Training set whose anchor is varied by the curriculum ablation.
    pub curriculum_set: Option<Vec<usize>>,
    pub subsets: Option<Vec<FreezeSubset>>,
}

pub fn parse_selection(s: &str) -> Result<SelectionRule, CliError> {
    let bad = || {
        CliError::Validation(format!(
            "selection {s:?} is not best_at_k:K or best_avg:K1,K2,..."
        ))
    };
    let (kind, ks) = s.split_once(':').ok_or_else(bad)?;
    let ks: Vec<usize> = ks
        .split(',')
        .map(|k| k.trim().parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    match (kind.trim(), ks.as_slice()) {
        ("best_at_k", [k]) => Ok(SelectionRule::BestAtK(*k)),
        ("best_avg", ks) if !ks.is_empty() => Ok(SelectionRule::BestAvg(ks.to_vec())),
        _ => Err(bad()),
    }
}

/// Training and evaluation data resolved from `[data]`.
pub struct Data {
    pub corpus: Corpus,
    pub sft: Corpus,
    pub eval: EvalSet,
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))
}

impl DataSection {
    pub fn load(&self, model: &ModelConfig) -> Result<Data, CliError> {
        let v = |e: phds_core::data::DataError| CliError::Validation(e.to_string());
        if self.seq_len > model.context_len {
            return Err(CliError::Validation(format!(
                "data.seq_len {} exceeds model.context_len {}",
                self.seq_len, model.context_len
            )));
        }
        let (corpus, sft, spec) = match (&self.corpus, &self.facts) {
            (Some(_), Some(_)) => {
                return Err(CliError::Validation(
                    "set only one of data.corpus and data.facts".into(),
                ))
            }
            (None, None) => {
                return Err(CliError::Validation(
                    "one of data.corpus and data.facts is required".into(),
                ))
            }
            (Some(path), None) => {
                let corpus = tokenize(&read(path)?).map_err(v)?;
                (corpus.clone(), corpus, McSpec::default())
            }
            (None, Some(f)) => {
                let facts =
                    FactCorpus::generate(f.n_facts, f.key_len, f.value_len, f.repeats, f.seed)
                        .map_err(v)?;
                let corpus = facts.corpus().map_err(v)?;
                let sft = facts
                    .with_passes(f.repeats, f.seed.wrapping_add(1))
                    .and_then(|s| s.corpus())
                    .map_err(v)?;
                (corpus, sft, facts.mc_spec())
            }
        };
        let sft = match &self.sft_corpus {
            Some(path) => tokenize(&read(path)?).map_err(v)?,
            None => sft,
        };
        if model.vocab_size < phds_core::data::VOCAB_SIZE {
            return Err(CliError::Validation(format!(
                "byte-level data needs vocab_size >= {}, model has {}",
                phds_core::data::VOCAB_SIZE,
                model.vocab_size
            )));
        }
        let items: Vec<McItem> = match &self.mc_items {
            Some(path) => {
                read_mc_jsonl(std::io::BufReader::new(read(path)?.as_slice())).map_err(v)?
            }
            None => make_mc_task(&corpus, self.mc_count, self.mc_options, self.mc_seed, spec)
                .map_err(v)?,
        };
        let windows = eval_windows(
            corpus.split(Split::Val),
            self.seq_len,
            Some(self.eval_windows),
        )
        .map_err(v)?;
        Ok(Data {
            corpus,
            sft,
            eval: EvalSet {
                windows,
                items,
                batch_size: self.eval_batch,
            },
        })
    }

    pub fn steps(&self, tokens: u64, what: &str) -> Result<u64, CliError> {
        let per_step = (self.batch_size * self.seq_len) as u64;
        let steps = tokens / per_step;
        if steps == 0 {
            return Err(CliError::Validation(format!(
                "{what} of {tokens} tokens is less than one step of {per_step} tokens"
            )));
        }
        Ok(steps)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {}", e.message())))
    }

    /// Optimizer settings with the given schedule and budget.
    pub fn train_config(
        &self,
        schedule: SparsitySchedule,
        steps: u64,
        seed: u64,
    ) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let mut c = TrainConfig::new(
            schedule,
            steps,
            self.data.batch_size,
            self.data.seq_len,
            seed,
        );
        c.lb_coefficient = t.lb;
        c.learning_rate = t.learning_rate;
        c.betas = t.betas;
        c.weight_decay = t.weight_decay;
        c.grad_clip = t.grad_clip;
        c.eval_every = t.eval_every.min(steps);
        c.burn_in_steps = t.burn_in_steps;
        c.freeze_subset = t.freeze_subset;
        c.validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(c)
    }

    pub fn regime(&self, text: Option<&str>) -> Result<Regime, CliError> {
        text.unwrap_or(&self.sft.regime)
            .parse()
            .map_err(|e: phds_core::trainer::TrainError| CliError::Validation(e.to_string()))
    }

    /// SFT schedule for `regime` over `steps`.
    pub fn sft_schedule(
        &self,
        regime: &Regime,
        k_pre: usize,
        steps: u64,
    ) -> Result<SparsitySchedule, CliError> {
        let s = &self.sft;
        if !(0.0..=1.0).contains(&s.anneal_start) || !(0.0..=1.0).contains(&s.anneal_ramp) {
            return Err(CliError::Validation(
                "sft.anneal_start and sft.anneal_ramp must be in [0, 1]".into(),
            ));
        }
        let start = (s.anneal_start * steps as f64).round() as u64;
        let ramp = (s.anneal_ramp * steps as f64).round() as u64;
        regime
            .schedule(k_pre, start, ramp)
            .map_err(|e| CliError::Validation(e.to_string()))
    }

    pub fn selection(&self, k_pre: usize) -> Result<SelectionRule, CliError> {
        match &self.sft.selection {
            Some(s) => parse_selection(s),
            None => Ok(SelectionRule::BestAtK(k_pre)),
        }
    }

    /// `k` values evaluated at SFT checkpoints: the configured list, or the
    /// training set plus `k_pre`, always including those the rule needs.
    pub fn eval_ks(
        &self,
        schedule: &SparsitySchedule,
        rule: &SelectionRule,
    ) -> Result<Vec<usize>, CliError> {
        let mut ks = match &self.sft.eval_ks {
            Some(ks) => ks.clone(),
            None => {
                let mut ks = schedule.k_train_set.clone();
                ks.push(schedule.k_pre);
                ks
            }
        };
        ks.extend(match rule {
            SelectionRule::BestAtK(k) => vec![*k],
            SelectionRule::BestAvg(v) => v.clone(),
        });
        ks.sort_unstable();
        ks.dedup();
        if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > schedule.k_pre) {
            return Err(CliError::Validation(format!(
                "evaluation k={k} outside 1..={}",
                schedule.k_pre
            )));
        }
        Ok(ks)
    }

    pub fn ablation_sets(&self, k_pre: usize) -> Result<Vec<Vec<usize>>, CliError> {
        if let Some(sets) = &self.ablate.ktrain_sets {
            return Ok(sets.clone());
        }
        let mut sets = vec![
            default_k_train_set(k_pre).map_err(|e| CliError::Validation(e.to_string()))?,
            (1..=k_pre).collect(),
            vec![k_pre.div_ceil(2), k_pre],
        ];
        sets.dedup();
        Ok(sets)
    }
}
