//! Byte-level corpora, seeded batching and multiple-choice item generation.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 256 byte values plus two specials.
pub const VOCAB_SIZE: usize = 258;
pub const PAD: usize = 256;
pub const BOS: usize = 257;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record on line {line}: {msg}")]
    Format { line: usize, msg: String },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(DataError::Domain(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Token stream with a train prefix and a validation suffix.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub tokens: Vec<usize>,
    pub vocab_size: usize,
    /// First validation token.
    pub val_start: usize,
}

/// Byte-level tokens of `bytes`, with the last tenth held out for validation.
pub fn tokenize(bytes: &[u8]) -> Result<Corpus> {
    if bytes.is_empty() {
        return domain("cannot tokenize empty input");
    }
    let val = (bytes.len() / 10).max(1);
    Corpus::new(
        bytes.iter().map(|&b| b as usize).collect(),
        bytes.len() - val,
    )
}

/// Inverse of byte tokenization; specials are dropped.
pub fn detokenize(tokens: &[usize]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect()
}

impl Corpus {
    pub fn new(tokens: Vec<usize>, val_start: usize) -> Result<Self> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= VOCAB_SIZE) {
            return domain(format!("token {t} outside vocabulary of {VOCAB_SIZE}"));
        }
        if val_start >= tokens.len() || val_start == 0 {
            return domain(format!(
                "split at {val_start} leaves an empty side of {} tokens",
                tokens.len()
            ));
        }
        Ok(Self {
            tokens,
            vocab_size: VOCAB_SIZE,
            val_start,
        })
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.tokens[..self.val_start],
            Split::Val => &self.tokens[self.val_start..],
        }
    }
}

/// `inputs[b·L + i]` predicts `targets[b·L + i] = inputs[b·L + i + 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
    /// `(epoch, index within epoch)`.
    pub id: (u64, usize),
}

/// Iterator over one epoch of shuffled, non-overlapping windows.
pub struct Batches<'a> {
    tokens: &'a [usize],
    starts: Vec<usize>,
    seq_len: usize,
    batch_size: usize,
    epoch: u64,
    next: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let lo = self.next * self.batch_size;
        if lo + self.batch_size > self.starts.len() {
            return None;
        }
        let n = self.batch_size * self.seq_len;
        let mut inputs = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for &s in &self.starts[lo..lo + self.batch_size] {
            inputs.extend_from_slice(&self.tokens[s..s + self.seq_len]);
            targets.extend_from_slice(&self.tokens[s + 1..s + self.seq_len + 1]);
        }
        let id = (self.epoch, self.next);
        self.next += 1;
        Some(Batch {
            inputs,
            targets,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            id,
        })
    }
}

impl Batches<'_> {
    pub fn len(&self) -> usize {
        self.starts.len() / self.batch_size
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Number of batches per epoch: `⌊(n − 1) / (L·B)⌋` for a split of `n` tokens,
/// i.e. counted over the `n − 1` next-token pairs.
pub fn batches_per_epoch(split_len: usize, seq_len: usize, batch_size: usize) -> usize {
    split_len.saturating_sub(1) / seq_len / batch_size
}

/// Windows of `seq_len + 1` tokens start every `seq_len` positions from an
/// offset within the split's remainder, and are shuffled. Offset and order
/// depend only on `(seed, epoch)`. A trailing partial batch is dropped.
pub fn batches(
    corpus: &Corpus,
    split: Split,
    seq_len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Batches<'_>> {
    let tokens = corpus.split(split);
    if seq_len == 0 || batch_size == 0 {
        return domain("seq_len and batch_size must be positive");
    }
    if seq_len + 1 > tokens.len() {
        return domain(format!(
            "seq_len {seq_len} too large for split of {} tokens",
            tokens.len()
        ));
    }
    let n_windows = (tokens.len() - 1) / seq_len;
    let slack = (tokens.len() - 1) % seq_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let offset = rng.gen_range(0..=slack as u32) as usize;
    let mut starts: Vec<usize> = (0..n_windows).map(|w| offset + w * seq_len).collect();
    starts.shuffle(&mut rng);
    Ok(Batches {
        tokens,
        starts,
        seq_len,
        batch_size,
        epoch,
        next: 0,
    })
}

/// Contiguous validation windows for perplexity, in order.
pub fn eval_windows(
    tokens: &[usize],
    seq_len: usize,
    max_windows: Option<usize>,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if seq_len == 0 || seq_len + 1 > tokens.len() {
        return domain(format!(
            "seq_len {seq_len} too large for {} tokens",
            tokens.len()
        ));
    }
    let n = (tokens.len() - 1) / seq_len;
    let n = max_windows.map_or(n, |m| n.min(m));
    Ok((0..n)
        .map(|w| {
            let s = w * seq_len;
            (
                tokens[s..s + seq_len].to_vec(),
                tokens[s + 1..s + seq_len + 1].to_vec(),
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McItem {
    pub prompt: String,
    pub options: Vec<String>,
    pub answer_index: usize,
}

impl McItem {
    pub fn prompt_tokens(&self) -> Vec<usize> {
        self.prompt.bytes().map(|b| b as usize).collect()
    }

    pub fn option_tokens(&self, i: usize) -> Vec<usize> {
        self.options[i].bytes().map(|b| b as usize).collect()
    }
}

/// Shape of generated items.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McSpec {
    pub prompt_len: usize,
    pub continuation_len: usize,
    /// When set, continuations start right after this byte.
    pub anchor: Option<u8>,
}

impl Default for McSpec {
    fn default() -> Self {
        Self {
            prompt_len: 16,
            continuation_len: 8,
            anchor: None,
        }
    }
}

/// Items from the training split: the prompt precedes a position, the true
/// continuation follows it, and distractors are continuations at other
/// positions with different text.
pub fn make_mc_task(
    corpus: &Corpus,
    n_items: usize,
    n_options: usize,
    seed: u64,
    spec: McSpec,
) -> Result<Vec<McItem>> {
    if n_options < 2 {
        return domain(format!("n_options must be >= 2, got {n_options}"));
    }
    let tokens = corpus.split(Split::Train);
    let (p, c) = (spec.prompt_len, spec.continuation_len);
    if p == 0 || c == 0 {
        return domain("prompt and continuation lengths must be positive");
    }
    let text_at = |s: usize, len: usize| -> Option<String> {
        let bytes: Vec<u8> = tokens[s..s + len].iter().map(|&t| t as u8).collect();
        if tokens[s..s + len].iter().any(|&t| t >= 256) {
            return None;
        }
        String::from_utf8(bytes).ok()
    };
    let positions: Vec<usize> = (p..tokens.len().saturating_sub(c - 1))
        .filter(|&i| spec.anchor.map_or(true, |a| tokens[i - 1] == a as usize))
        .filter(|&i| text_at(i, c).is_some())
        .collect();
    let distinct: BTreeSet<&[usize]> = positions.iter().map(|&i| &tokens[i..i + c]).collect();
    if distinct.len() < n_options {
        return domain(format!(
            "corpus has {} distinct continuations, need at least {n_options}",
            distinct.len()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n_items);
    let mut attempts = 0usize;
    while items.len() < n_items {
        attempts += 1;
        if attempts > 100 * n_items.max(1) + 1000 {
            return domain("could not draw enough well-formed items from corpus");
        }
        let at = positions[rng.gen_range(0..positions.len() as u32) as usize];
        let Some(prompt) = text_at(at - p, p) else {
            continue;
        };
        let answer = text_at(at, c).expect("filtered above");
        let mut options = vec![answer.clone()];
        let mut tries = 0;
        while options.len() < n_options && tries < 1000 {
            tries += 1;
            let other = positions[rng.gen_range(0..positions.len() as u32) as usize];
            let cand = text_at(other, c).expect("filtered above");
            if !options.contains(&cand) {
                options.push(cand);
            }
        }
        if options.len() < n_options {
            continue;
        }
        let answer_index = rng.gen_range(0..n_options as u32) as usize;
        options.swap(0, answer_index);
        items.push(McItem {
            prompt,
            options,
            answer_index,
        });
    }
    Ok(items)
}

pub fn write_mc_jsonl(items: &[McItem], mut w: impl Write) -> Result<()> {
    for item in items {
        let line = serde_json::to_string(item).expect("items serialize");
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_mc_jsonl(r: impl BufRead) -> Result<Vec<McItem>> {
    let mut items = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: McItem = serde_json::from_str(&line).map_err(|e| DataError::Format {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if item.options.len() < 2 || item.answer_index >= item.options.len() {
            return Err(DataError::Format {
                line: i + 1,
                msg: "need >= 2 options and an in-range answer_index".into(),
            });
        }
        items.push(item);
    }
    Ok(items)
}

/// A synthetic recall corpus of `key:value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct FactCorpus {
    pub facts: Vec<(String, String)>,
    pub text: String,
    /// Byte offset where the validation pass begins.
    pub val_start: usize,
}

impl FactCorpus {
    /// `n_facts` random lowercase pairs. The training text lists every fact
    /// `repeats` times, each pass in a fresh order; one more pass is held out.
    pub fn generate(
        n_facts: usize,
        key_len: usize,
        value_len: usize,
        repeats: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_facts < 2 || key_len == 0 || value_len == 0 {
            return domain("need >= 2 facts and positive key/value lengths");
        }
        if (26f64).powi(key_len as i32) < 2.0 * n_facts as f64 {
            return domain(format!(
                "key length {key_len} too short for {n_facts} distinct keys"
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let word = |rng: &mut ChaCha8Rng, n: usize| -> String {
            (0..n)
                .map(|_| (b'a' + rng.gen_range(0..26u32) as u8) as char)
                .collect()
        };
        let mut keys = BTreeSet::new();
        let mut facts = Vec::with_capacity(n_facts);
        while facts.len() < n_facts {
            let k = word(&mut rng, key_len);
            if keys.insert(k.clone()) {
                facts.push((k, word(&mut rng, value_len)));
            }
        }
        Self::from_facts(facts, repeats, rng.gen())
    }

    /// The same facts laid out again with `repeats` fresh orderings.
    pub fn with_passes(&self, repeats: usize, seed: u64) -> Result<Self> {
        Self::from_facts(self.facts.clone(), repeats, seed)
    }

    fn from_facts(facts: Vec<(String, String)>, repeats: usize, seed: u64) -> Result<Self> {
        if repeats == 0 {
            return domain("repeats must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut text = String::new();
        let mut order: Vec<usize> = (0..facts.len()).collect();
        let mut val_start = 0;
        for pass in 0..=repeats {
            if pass == repeats {
                val_start = text.len();
            }
            order.shuffle(&mut rng);
            for &i in &order {
                let (k, v) = &facts[i];
                text.push_str(k);
                text.push(':');
                text.push_str(v);
                text.push('\n');
                // A random blank line keeps facts from sitting at a fixed
                // period, so position embeddings cannot encode the layout.
                if rng.gen_bool(0.5) {
                    text.push('\n');
                }
            }
        }
        Ok(Self {
            facts,
            text,
            val_start,
        })
    }

    pub fn corpus(&self) -> Result<Corpus> {
        Corpus::new(
            self.text.bytes().map(|b| b as usize).collect(),
            self.val_start,
        )
    }

    /// Items of the form `"…\nkey:"` with the value as the correct option.
    pub fn mc_spec(&self) -> McSpec {
        let key_len = self.facts[0].0.len();
        McSpec {
            prompt_len: key_len + 2,
            continuation_len: self.facts[0].1.len(),
            anchor: Some(b':'),
        }
    }
}
