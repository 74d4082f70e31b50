//! Seeded synthetic classification tasks.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

/// Labelling rule of a synthetic task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// `sum(tokens) mod C`.
    Parity,
    /// `tokens[T - 1] mod C`.
    CopyClass,
    /// Tokens fall into `C` clusters (`token mod C`); the label is the cluster
    /// that occurs most often, ties to the lower cluster.
    #[default]
    ClusterTokens,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Parity => "parity",
            TaskKind::CopyClass => "copy-class",
            TaskKind::ClusterTokens => "cluster-tokens",
        }
    }

    /// Label of one sequence.
    pub fn label(self, tokens: &[u32], num_classes: usize) -> u32 {
        let c = num_classes as u32;
        match self {
            TaskKind::Parity => tokens.iter().map(|&t| t % c).sum::<u32>() % c,
            TaskKind::CopyClass => tokens.last().copied().unwrap_or(0) % c,
            TaskKind::ClusterTokens => {
                let mut counts = vec![0usize; num_classes];
                tokens.iter().for_each(|&t| counts[(t % c) as usize] += 1);
                let best = counts.iter().copied().max().unwrap_or(0);
                counts.iter().position(|&n| n == best).unwrap_or(0) as u32
            }
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            TaskKind::Parity,
            TaskKind::CopyClass,
            TaskKind::ClusterTokens,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

/// Parameters of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            kind: TaskKind::ClusterTokens,
            vocab: 16,
            seq_len: 8,
            num_classes: 4,
            train_size: 2048,
            val_size: 512,
            seed: 0,
        }
    }
}

/// Labelled sequences of a fixed length.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seq_len: usize,
    /// Row-major `[len, seq_len]`.
    pub tokens: Vec<u32>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Batch made of the rows in `rows`.
    pub fn batch(&self, rows: &[usize]) -> Result<Batch> {
        let tokens = rows
            .iter()
            .flat_map(|&r| self.sequence(r).iter().copied())
            .collect();
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Batch::new(tokens, rows.len(), self.seq_len, labels)
    }

    /// Consecutive full batches in row order; a trailing partial batch is dropped.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let order: Vec<usize> = (0..self.len()).collect();
        let full = self.len() / batch_size.max(1);
        (0..full).map(move |b| self.batch(&order[b * batch_size..(b + 1) * batch_size]))
    }
}

/// Train and validation splits with no sequence in common.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.seq_len == 0 || self.num_classes < 2 {
            return Err(Error::Config(
                "task needs vocab >= 2, seq_len >= 1 and num_classes >= 2".into(),
            ));
        }
        if self.train_size == 0 {
            return Err(Error::Config("train_size must be >= 1".into()));
        }
        let space = (self.vocab as f64).powi(self.seq_len as i32);
        if ((self.train_size + self.val_size) as f64) > space {
            return Err(Error::Config(format!(
                "{} unique sequences requested but only {space} exist",
                self.train_size + self.val_size
            )));
        }
        Ok(())
    }

    /// Draws unique sequences, so train and validation are disjoint.
    pub fn generate(&self) -> Result<Splits> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let total = self.train_size + self.val_size;
        let mut seen = HashSet::with_capacity(total);
        let mut tokens = Vec::with_capacity(total * self.seq_len);
        while seen.len() < total {
            let seq: Vec<u32> = (0..self.seq_len)
                .map(|_| rng.random_range(0..self.vocab as u32))
                .collect();
            if seen.insert(seq.clone()) {
                tokens.extend(seq);
            }
        }
        let make = |range: std::ops::Range<usize>| {
            let tokens = tokens[range.start * self.seq_len..range.end * self.seq_len].to_vec();
            let labels = tokens
                .chunks(self.seq_len)
                .map(|s| self.kind.label(s, self.num_classes))
                .collect();
            Dataset {
                seq_len: self.seq_len,
                tokens,
                labels,
            }
        };
        Ok(Splits {
            train: make(0..self.train_size),
            val: make(self.train_size..total),
        })
    }
}
