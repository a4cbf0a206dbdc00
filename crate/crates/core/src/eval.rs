//! Perplexity and multiple-choice accuracy at a declared `k`, cross-run
//! answer agreement, and FLOPs sweeps.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::data::McItem;
use crate::model::flops::flops_per_token;
use crate::model::{Model, ModelError, Sparsity};
use crate::tensor::{token_nll, Scalar};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Held-out data for one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    /// `(inputs, targets)` windows of equal length.
    pub windows: Vec<(Vec<usize>, Vec<usize>)>,
    pub items: Vec<McItem>,
    /// Sequences per forward pass.
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub k_ev: usize,
    pub perplexity: f64,
    pub mc_accuracy: f64,
    pub answers: Vec<usize>,
    pub flops_per_token: u64,
    pub active_params: u64,
}

/// Mean NLL in nats over all target tokens of `windows`.
pub fn mean_nll<T: Scalar>(
    model: &Model<T>,
    windows: &[(Vec<usize>, Vec<usize>)],
    batch_size: usize,
    sp: Sparsity,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(EvalError::Domain("no evaluation windows".into()));
    }
    let seq = windows[0].0.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(batch_size.max(1)) {
        let ids: Vec<usize> = chunk.iter().flat_map(|w| w.0.iter().copied()).collect();
        let targets: Vec<usize> = chunk.iter().flat_map(|w| w.1.iter().copied()).collect();
        let logits = model.logits(&ids, chunk.len(), seq, sp)?;
        let nll = token_nll(&logits, &targets).map_err(ModelError::from)?;
        total += nll.iter().sum::<f64>();
        count += nll.len();
    }
    Ok(total / count as f64)
}

/// Length-normalized NLL of every option of every item, `[item][option]`.
pub fn option_scores<T: Scalar>(
    model: &Model<T>,
    items: &[McItem],
    batch_size: usize,
    sp: Sparsity,
) -> Result<Vec<Vec<f64>>> {
    // (item, option, tokens, prompt length)
    let mut seqs: Vec<(usize, usize, Vec<usize>, usize)> = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let prompt = item.prompt_tokens();
        if prompt.is_empty() {
            return Err(EvalError::Domain(format!("item {i} has an empty prompt")));
        }
        for o in 0..item.options.len() {
            let opt = item.option_tokens(o);
            if opt.is_empty() {
                return Err(EvalError::Domain(format!("item {i} option {o} is empty")));
            }
            let mut toks = prompt.clone();
            toks.extend(opt);
            seqs.push((i, o, toks, prompt.len()));
        }
    }
    // Group equal lengths so each forward pass is rectangular; order inside
    // a group follows the item order.
    seqs.sort_by_key(|s| s.2.len());
    let mut scores: Vec<Vec<f64>> = items.iter().map(|it| vec![0.0; it.options.len()]).collect();
    let mut start = 0;
    while start < seqs.len() {
        let len = seqs[start].2.len();
        let mut end = start;
        while end < seqs.len() && seqs[end].2.len() == len && end - start < batch_size.max(1) {
            end += 1;
        }
        let group = &seqs[start..end];
        let seq = len - 1;
        let ids: Vec<usize> = group
            .iter()
            .flat_map(|s| s.2[..seq].iter().copied())
            .collect();
        let targets: Vec<usize> = group
            .iter()
            .flat_map(|s| s.2[1..].iter().copied())
            .collect();
        let logits = model.logits(&ids, group.len(), seq, sp)?;
        let nll = token_nll(&logits, &targets).map_err(ModelError::from)?;
        for (g, (item, opt, _, plen)) in group.iter().enumerate() {
            let row = &nll[g * seq..(g + 1) * seq];
            let cont = &row[plen - 1..];
            scores[*item][*opt] = cont.iter().sum::<f64>() / cont.len() as f64;
        }
        start = end;
    }
    Ok(scores)
}

/// Index of the lowest score; ties go to the lower index.
fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    set: &EvalSet,
    k_ev: usize,
    override_k_bound: bool,
) -> Result<EvalReport> {
    let sp = Sparsity::resolve(model, k_ev, override_k_bound)?;
    let f = flops_per_token(&model.config, k_ev)?;
    let perplexity = mean_nll(model, &set.windows, set.batch_size, sp)?.exp();
    let scores = option_scores(model, &set.items, set.batch_size, sp)?;
    let answers: Vec<usize> = scores.iter().map(|s| argmin(s)).collect();
    let correct = answers
        .iter()
        .zip(&set.items)
        .filter(|(a, it)| **a == it.answer_index)
        .count();
    let mc_accuracy = if set.items.is_empty() {
        0.0
    } else {
        correct as f64 / set.items.len() as f64
    };
    Ok(EvalReport {
        k_ev,
        perplexity,
        mc_accuracy,
        answers,
        flops_per_token: f.flops_per_token,
        active_params: f.active_params,
    })
}

/// Fraction of positions where the two answer vectors agree.
pub fn agreement(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EvalError::Domain(format!(
            "answer lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(EvalError::Domain("no answers to compare".into()));
    }
    let matches = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(matches as f64 / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    pub model_a: String,
    pub model_b: String,
    pub k_a: usize,
    pub k_b: usize,
    pub n: usize,
    pub agreement: f64,
}

impl AgreementReport {
    pub fn new(
        model_a: &str,
        k_a: usize,
        a: &[usize],
        model_b: &str,
        k_b: usize,
        b: &[usize],
    ) -> Result<Self> {
        Ok(Self {
            agreement: agreement(a, b)?,
            model_a: model_a.into(),
            model_b: model_b.into(),
            k_a,
            k_b,
            n: a.len(),
        })
    }

    /// One line of space-separated `key=value` pairs.
    pub fn to_record(&self) -> String {
        format!(
            "model_a={} k_a={} model_b={} k_b={} n={} agreement={}",
            self.model_a, self.k_a, self.model_b, self.k_b, self.n, self.agreement
        )
    }
}

/// One report per `k`, in ascending `k` order.
pub fn sweep<T: Scalar>(
    model: &Model<T>,
    set: &EvalSet,
    ks: &[usize],
    override_k_bound: bool,
) -> Result<Vec<EvalReport>> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    ks.into_iter()
        .map(|k| evaluate(model, set, k, override_k_bound))
        .collect()
}

#[derive(Serialize)]
struct SweepRow {
    k: usize,
    active_params: u64,
    flops_per_token: u64,
    perplexity: f64,
    mc_accuracy: f64,
}

pub fn write_sweep_csv(reports: &[EvalReport], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in reports {
        out.serialize(SweepRow {
            k: r.k_ev,
            active_params: r.active_params,
            flops_per_token: r.flops_per_token,
            perplexity: r.perplexity,
            mc_accuracy: r.mc_accuracy,
        })?;
    }
    out.flush()?;
    Ok(())
}
