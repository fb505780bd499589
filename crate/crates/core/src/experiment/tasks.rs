//! Synthetic integer-token tasks with exact-match accuracy.
//!
//! Ids below [`FIRST_CONTENT`] are reserved markers; everything else is
//! content.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{LabeledBatch, Targets, TokenBatch};

use super::{ExperimentError, Result};

pub const QUERY: u32 = 1;
pub const FIRST_CONTENT: u32 = 3;

/// Attempts per example before giving up on finding an unseen sequence.
const MAX_DRAWS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Filler, then `QUERY key`; the answer is a fixed table lookup.
    KeyedLookup,
    /// A short motif repeated to fill the sequence; next-token targets at
    /// every position.
    PatternCompletion,
    /// Two-symbol sequence; the answer encodes the parity of one symbol's
    /// count in the trailing window.
    ParityOfWindow,
}

impl std::str::FromStr for TaskKind {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keyed-lookup" => Ok(TaskKind::KeyedLookup),
            "pattern-completion" => Ok(TaskKind::PatternCompletion),
            "parity-of-window" => Ok(TaskKind::ParityOfWindow),
            other => Err(ExperimentError::Config(format!("task.kind: unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub eval_size: usize,
    /// Table size for keyed lookup.
    #[serde(default = "default_keys")]
    pub keys: usize,
    /// Trailing window for parity.
    #[serde(default = "default_window")]
    pub window: usize,
}

fn default_keys() -> usize {
    128
}

fn default_window() -> usize {
    4
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::KeyedLookup,
            vocab_size: 256,
            seq_len: 16,
            train_size: 2000,
            eval_size: 200,
            keys: default_keys(),
            window: default_window(),
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        let content = self.vocab_size.saturating_sub(FIRST_CONTENT as usize);
        if content < 4 {
            return bad(format!(
                "task.vocab_size: {} leaves fewer than 4 content tokens",
                self.vocab_size
            ));
        }
        if self.seq_len < 3 {
            return bad(format!("task.seq_len: {} is shorter than 3", self.seq_len));
        }
        if self.train_size == 0 || self.eval_size == 0 {
            return bad("task.train_size and task.eval_size must be positive".into());
        }
        if self.kind == TaskKind::KeyedLookup && !(1..=content).contains(&self.keys) {
            return bad(format!("task.keys: {} outside 1..={content}", self.keys));
        }
        if self.kind == TaskKind::ParityOfWindow && !(1..=self.seq_len).contains(&self.window) {
            return bad(format!("task.window: {} outside 1..={}", self.window, self.seq_len));
        }
        Ok(())
    }
}

/// One input sequence with either a single answer or a target per position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec_kind: TaskKind,
    pub seq_len: usize,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

struct Generator {
    spec: TaskSpec,
    table: Vec<(u32, u32)>,
    motif: Vec<u32>,
}

impl Generator {
    fn new(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Self {
        let content: Vec<u32> = (FIRST_CONTENT..spec.vocab_size as u32).collect();
        let table = if spec.kind == TaskKind::KeyedLookup {
            let mut keys = content.clone();
            keys.shuffle(rng);
            keys.truncate(spec.keys);
            keys.into_iter()
                .map(|k| (k, content[rng.random_range(0..content.len())]))
                .collect()
        } else {
            Vec::new()
        };
        let motif = vec![FIRST_CONTENT + 2, FIRST_CONTENT + 3];
        Self {
            spec: spec.clone(),
            table,
            motif,
        }
    }

    fn content(&self, rng: &mut ChaCha8Rng) -> u32 {
        rng.random_range(FIRST_CONTENT..self.spec.vocab_size as u32)
    }

    fn example(&self, rng: &mut ChaCha8Rng) -> Example {
        let t = self.spec.seq_len;
        match self.spec.kind {
            TaskKind::KeyedLookup => {
                let mut input: Vec<u32> = (0..t - 2).map(|_| self.content(rng)).collect();
                let (key, value) = self.table[rng.random_range(0..self.table.len())];
                input.push(QUERY);
                input.push(key);
                Example {
                    input,
                    target: vec![value],
                }
            }
            TaskKind::PatternCompletion => {
                let period = rng.random_range(2..=4usize);
                let motif: Vec<u32> = (0..period).map(|_| self.content(rng)).collect();
                let full: Vec<u32> = (0..=t).map(|i| motif[i % period]).collect();
                Example {
                    input: full[..t].to_vec(),
                    target: full[1..].to_vec(),
                }
            }
            TaskKind::ParityOfWindow => {
                let input: Vec<u32> = (0..t).map(|_| self.motif[rng.random_range(0..2)]).collect();
                let ones = input[t - self.spec.window..]
                    .iter()
                    .filter(|&&x| x == self.motif[1])
                    .count();
                Example {
                    input,
                    target: vec![FIRST_CONTENT + (ones % 2) as u32],
                }
            }
        }
    }

    fn draw_unique(&self, rng: &mut ChaCha8Rng, n: usize, seen: &mut HashSet<Vec<u32>>) -> Result<Vec<Example>> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let ex = (0..MAX_DRAWS)
                .map(|_| self.example(rng))
                .find(|e| !seen.contains(&e.input))
                .ok_or_else(|| ExperimentError::Config("task too small for disjoint train and eval sets".into()))?;
            seen.insert(ex.input.clone());
            out.push(ex);
        }
        Ok(out)
    }
}

/// Deterministic train and eval sets with no input sequence in common.
pub fn generate_toy_task(spec: &TaskSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Generator::new(spec, &mut rng);
    let mut seen = HashSet::new();
    let eval = g.draw_unique(&mut rng, spec.eval_size, &mut seen)?;
    let train = g.draw_unique(&mut rng, spec.train_size, &mut seen)?;
    Ok(Dataset {
        spec_kind: spec.kind,
        seq_len: spec.seq_len,
        train,
        eval,
    })
}

fn to_batch(examples: &[&Example], seq_len: usize) -> Result<LabeledBatch> {
    let ids = examples.iter().flat_map(|e| e.input.iter().copied()).collect();
    let tokens = TokenBatch::new(examples.len(), seq_len, ids)?;
    let every = examples
        .first()
        .is_some_and(|e| e.target.len() == seq_len && seq_len > 1);
    let targets: Vec<u32> = examples.iter().flat_map(|e| e.target.iter().copied()).collect();
    Ok(LabeledBatch {
        tokens,
        targets: if every {
            Targets::Every(targets)
        } else {
            Targets::Last(targets)
        },
    })
}

impl Dataset {
    /// `steps` training batches drawn epoch by epoch in shuffled order.
    pub fn train_batches(&self, steps: usize, batch_size: usize, seed: u64) -> Result<Vec<LabeledBatch>> {
        if batch_size == 0 || batch_size > self.train.len() {
            return Err(ExperimentError::Config(format!(
                "batch size {batch_size} for {} training examples",
                self.train.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = Vec::new();
        let mut out = Vec::with_capacity(steps);
        let mut cursor = 0;
        for _ in 0..steps {
            if cursor + batch_size > order.len() {
                order = (0..self.train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let picked: Vec<&Example> = order[cursor..cursor + batch_size]
                .iter()
                .map(|&i| &self.train[i])
                .collect();
            cursor += batch_size;
            out.push(to_batch(&picked, self.seq_len)?);
        }
        Ok(out)
    }

    /// The eval set in order, in chunks of `batch_size` (the last may be
    /// shorter).
    pub fn eval_batches(&self, batch_size: usize) -> Result<Vec<LabeledBatch>> {
        if batch_size == 0 {
            return Err(ExperimentError::Config("batch size must be positive".into()));
        }
        self.eval
            .chunks(batch_size)
            .map(|c| to_batch(&c.iter().collect::<Vec<_>>(), self.seq_len))
            .collect()
    }
}

/// Final-position answers of `batch`.
pub fn last_targets(batch: &LabeledBatch) -> Vec<u32> {
    match &batch.targets {
        Targets::Last(t) => t.clone(),
        Targets::Every(t) => t.chunks(batch.tokens.seq).map(|r| r[r.len() - 1]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_and_disjoint() {
        for kind in [
            TaskKind::KeyedLookup,
            TaskKind::PatternCompletion,
            TaskKind::ParityOfWindow,
        ] {
            let spec = TaskSpec {
                kind,
                ..TaskSpec::default()
            };
            let a = generate_toy_task(&spec, 7).unwrap();
            let b = generate_toy_task(&spec, 7).unwrap();
            assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
            assert_eq!((a.train.len(), a.eval.len()), (2000, 200));
            let eval: HashSet<&Vec<u32>> = a.eval.iter().map(|e| &e.input).collect();
            assert!(a.train.iter().all(|e| !eval.contains(&e.input)));
            assert!(a
                .train
                .iter()
                .chain(&a.eval)
                .all(|e| e.input.len() == 16 && e.input.iter().all(|&t| t < 256)));
            assert_ne!(generate_toy_task(&spec, 8).unwrap(), a);
        }
    }

    #[test]
    fn keyed_lookup_answers_follow_one_table() {
        let d = generate_toy_task(&TaskSpec::default(), 3).unwrap();
        let mut table = std::collections::HashMap::new();
        for e in d.train.iter().chain(&d.eval) {
            assert_eq!(e.input[14], QUERY);
            let prev = table.insert(e.input[15], e.target[0]);
            assert!(prev.is_none() || prev == Some(e.target[0]));
        }
        assert!(table.len() <= 128);
    }

    #[test]
    fn parity_and_pattern_rules() {
        let spec = TaskSpec {
            kind: TaskKind::ParityOfWindow,
            seq_len: 8,
            window: 3,
            train_size: 100,
            eval_size: 50,
            ..TaskSpec::default()
        };
        for e in generate_toy_task(&spec, 1).unwrap().train.iter().take(50) {
            let ones = e.input[5..].iter().filter(|&&x| x == FIRST_CONTENT + 3).count() as u32;
            assert_eq!(e.target, vec![FIRST_CONTENT + ones % 2]);
        }
        let spec = TaskSpec {
            kind: TaskKind::PatternCompletion,
            ..TaskSpec::default()
        };
        for e in generate_toy_task(&spec, 1).unwrap().train.iter().take(50) {
            assert_eq!(e.input[1..], e.target[..15]);
        }
    }

    #[test]
    fn batching() {
        let d = generate_toy_task(&TaskSpec::default(), 2).unwrap();
        let tb = d.train_batches(300, 16, 5).unwrap();
        assert_eq!(tb.len(), 300);
        assert_eq!(tb, d.train_batches(300, 16, 5).unwrap());
        assert!(matches!(tb[0].targets, Targets::Last(ref t) if t.len() == 16));
        let eb = d.eval_batches(16).unwrap();
        assert_eq!(eb.len(), 13);
        assert_eq!(eb[12].tokens.batch, 8);
        assert!("bogus".parse::<TaskKind>().is_err());
        let lm = generate_toy_task(
            &TaskSpec {
                kind: TaskKind::PatternCompletion,
                ..TaskSpec::default()
            },
            2,
        )
        .unwrap();
        let b = &lm.train_batches(1, 4, 0).unwrap()[0];
        assert!(matches!(b.targets, Targets::Every(ref t) if t.len() == 64));
        assert_eq!(last_targets(b).len(), 4);
    }
}
