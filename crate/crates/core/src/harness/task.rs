//! Synthetic 4-class sequence classification.
//!
//! Vocabulary of 32 tokens, sequences of 16. Class `c` owns the motif tokens
//! `{2c, 2c+1}`; tokens `8..32` are filler. Every sequence contains both motif
//! tokens of its class and one decoy token taken from a different class's
//! motif, at three distinct random positions; the remaining positions are
//! uniform filler. The label is therefore the class with two motif tokens
//! present. Full description in `docs/synth_task.md`.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived, SeededRng};

pub const VOCAB: usize = 32;
pub const SEQ_LEN: usize = 16;
pub const CLASSES: usize = 4;
const FILLER_START: usize = 2 * CLASSES;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub seq_len: usize,
}

impl Dataset {
    pub fn vocab(&self) -> usize {
        VOCAB
    }

    pub fn classes(&self) -> usize {
        CLASSES
    }
}

fn example(rng: &mut SeededRng, seq_len: usize) -> Example {
    let label = rng.random_range(0..CLASSES);
    let decoy_class = (label + rng.random_range(1..CLASSES)) % CLASSES;
    let decoy = 2 * decoy_class + rng.random_range(0..2);
    let mut tokens: Vec<usize> = (0..seq_len).map(|_| rng.random_range(FILLER_START..VOCAB)).collect();
    let pos = sample(rng, seq_len, 3);
    tokens[pos.index(0)] = 2 * label;
    tokens[pos.index(1)] = 2 * label + 1;
    tokens[pos.index(2)] = decoy;
    Example { tokens, label }
}

/// Generates the train and eval splits for a seed, with sequences of `seq_len`.
pub fn synth_task_with_len(seed: u64, n_train: usize, n_eval: usize, seq_len: usize) -> Result<Dataset> {
    if seq_len < 3 {
        return Err(Error::Config(format!(
            "synthetic task needs seq_len >= 3, got {seq_len}"
        )));
    }
    let mut train_rng = derived(seed, 1);
    let mut eval_rng = derived(seed, 2);
    Ok(Dataset {
        train: (0..n_train).map(|_| example(&mut train_rng, seq_len)).collect(),
        eval: (0..n_eval).map(|_| example(&mut eval_rng, seq_len)).collect(),
        seq_len,
    })
}

/// The standard task: 16-token sequences.
pub fn synth_task(seed: u64, n_train: usize, n_eval: usize) -> Dataset {
    synth_task_with_len(seed, n_train, n_eval, SEQ_LEN).expect("default sequence length is valid")
}

/// A fixed probe set drawn from its own stream, disjoint in sampling from train and eval.
pub fn probe_examples(seed: u64, count: usize, seq_len: usize) -> Result<Vec<Example>> {
    if seq_len < 3 {
        return Err(Error::Config(format!(
            "synthetic task needs seq_len >= 3, got {seq_len}"
        )));
    }
    let mut rng = derived(seed, 4);
    Ok((0..count).map(|_| example(&mut rng, seq_len)).collect())
}

/// The label an oracle reads off a sequence: the class with both motif tokens present.
pub fn oracle_label(tokens: &[usize]) -> Option<usize> {
    (0..CLASSES).find(|&c| tokens.contains(&(2 * c)) && tokens.contains(&(2 * c + 1)))
}
