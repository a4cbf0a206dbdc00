//! Which sparsity level to train at on a given step.
//!
//! Before `anneal_start_step`, `k` is uniform over the training set. With an
//! anchor, the anchor's probability then rises linearly from `1/|K|` to 1
//! over `anneal_ramp_steps` (0 switches immediately), the rest of the mass
//! spread evenly over the other values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsitySchedule {
    /// Ascending, without duplicates.
    pub k_train_set: Vec<usize>,
    #[serde(default)]
    pub anchor_k: Option<usize>,
    #[serde(default)]
    pub anneal_start_step: u64,
    #[serde(default)]
    pub anneal_ramp_steps: u64,
    pub k_pre: usize,
}

impl SparsitySchedule {
    pub fn new(
        k_train_set: impl IntoIterator<Item = usize>,
        anchor_k: Option<usize>,
        anneal_start_step: u64,
        anneal_ramp_steps: u64,
        k_pre: usize,
    ) -> Result<Self, ScheduleError> {
        let mut ks: Vec<usize> = k_train_set.into_iter().collect();
        ks.sort_unstable();
        ks.dedup();
        let s = Self {
            k_train_set: ks,
            anchor_k,
            anneal_start_step,
            anneal_ramp_steps,
            k_pre,
        };
        s.validate()?;
        Ok(s)
    }

    /// Always trains at `k`.
    pub fn fixed(k: usize, k_pre: usize) -> Result<Self, ScheduleError> {
        Self::new([k], None, 0, 0, k_pre)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |m: String| Err(ScheduleError::Config(m));
        let ks = &self.k_train_set;
        if ks.is_empty() {
            return bad("k_train_set is empty".into());
        }
        if ks.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("k_train_set {ks:?} must be strictly ascending"));
        }
        if ks[0] < 1 {
            return bad("k values must be >= 1".into());
        }
        if *ks.last().unwrap() > self.k_pre {
            return bad(format!("k_train_set {ks:?} exceeds k_pre {}", self.k_pre));
        }
        if let Some(a) = self.anchor_k {
            if !ks.contains(&a) {
                return bad(format!("anchor {a} not in k_train_set {ks:?}"));
            }
        }
        Ok(())
    }

    /// Probability of drawing the anchor at `step`, if there is one.
    pub fn anchor_probability(&self, step: u64) -> Option<f64> {
        self.anchor_k?;
        let n = self.k_train_set.len() as f64;
        if step < self.anneal_start_step {
            return Some(1.0 / n);
        }
        let into = step - self.anneal_start_step;
        if into >= self.anneal_ramp_steps {
            return Some(1.0);
        }
        let frac = into as f64 / self.anneal_ramp_steps as f64;
        Some(1.0 / n + (1.0 - 1.0 / n) * frac)
    }

    /// Draws `k` for `step`. A pure function of `(self, step, seed)`.
    pub fn sample_k(&self, step: u64, seed: u64) -> Result<usize, ScheduleError> {
        self.validate()?;
        let ks = &self.k_train_set;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        let uniform = |rng: &mut ChaCha8Rng, pool: &[usize]| {
            pool[rng.gen_range(0..pool.len() as u32) as usize]
        };
        let (anchor, p) = match (self.anchor_k, self.anchor_probability(step)) {
            (Some(a), Some(p)) if step >= self.anneal_start_step => (a, p),
            _ => return Ok(uniform(&mut rng, ks)),
        };
        if p >= 1.0 {
            return Ok(anchor);
        }
        if rng.gen::<f64>() < p {
            return Ok(anchor);
        }
        let rest: Vec<usize> = ks.iter().copied().filter(|&k| k != anchor).collect();
        Ok(uniform(&mut rng, &rest))
    }

    /// Compact form such as `[2,3,4]→2`.
    pub fn notation(&self) -> String {
        let set = self
            .k_train_set
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(",");
        match self.anchor_k {
            Some(a) => format!("[{set}]→{a}"),
            None => format!("[{set}]"),
        }
    }
}

/// `{⌈k_pre/2⌉, …, k_pre}`.
pub fn default_k_train_set(k_pre: usize) -> Result<Vec<usize>, ScheduleError> {
    if k_pre < 2 {
        return Err(ScheduleError::Domain(format!(
            "k_pre must be >= 2, got {k_pre}"
        )));
    }
    Ok((k_pre.div_ceil(2)..=k_pre).collect())
}
