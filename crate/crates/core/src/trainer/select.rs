use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub perplexity: f64,
    pub mc_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: u64,
    pub metrics: BTreeMap<usize, KMetrics>,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Highest accuracy at one `k`.
    BestAtK(usize),
    /// Highest mean accuracy over several `k`.
    BestAvg(Vec<usize>),
}

impl SelectionRule {
    fn ks(&self) -> &[usize] {
        match self {
            SelectionRule::BestAtK(k) => std::slice::from_ref(k),
            SelectionRule::BestAvg(ks) => ks,
        }
    }

    /// `(mean accuracy, mean perplexity)` over the rule's `k` values.
    fn score(&self, r: &CheckpointRecord) -> Result<(f64, f64), TrainError> {
        let ks = self.ks();
        if ks.is_empty() {
            return Err(TrainError::Selection("rule lists no k values".into()));
        }
        let mut acc = 0.0;
        let mut ppl = 0.0;
        for k in ks {
            let m = r.metrics.get(k).ok_or_else(|| {
                TrainError::Selection(format!(
                    "record at step {} has no metrics for k={k}",
                    r.step
                ))
            })?;
            acc += m.mc_accuracy;
            ppl += m.perplexity;
        }
        let n = ks.len() as f64;
        Ok((acc / n, ppl / n))
    }
}

/// Best record at or after `burn_in` by accuracy, then lower perplexity,
/// then the later step.
pub fn select_checkpoint<'a>(
    records: &'a [CheckpointRecord],
    rule: &SelectionRule,
    burn_in: u64,
) -> Result<&'a CheckpointRecord, TrainError> {
    let mut best: Option<(&CheckpointRecord, (f64, f64))> = None;
    for r in records.iter().filter(|r| r.step >= burn_in) {
        let s = rule.score(r)?;
        let better = match &best {
            None => true,
            Some((b, bs)) => match s.0.partial_cmp(&bs.0).unwrap_or(Ordering::Equal) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => match s.1.partial_cmp(&bs.1).unwrap_or(Ordering::Equal) {
                    Ordering::Less => true,
                    Ordering::Greater => false,
                    Ordering::Equal => r.step > b.step,
                },
            },
        };
        if better {
            best = Some((r, s));
        }
    }
    best.map(|(r, _)| r).ok_or_else(|| {
        TrainError::Selection(format!("no records at or after burn-in step {burn_in}"))
    })
}
