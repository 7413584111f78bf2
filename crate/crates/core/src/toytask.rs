//! The digit-counting toy task: given a digit sequence and a query `(n, m)`,
//! decide whether `n` occurs strictly more often than `m`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_DIGITS: usize = 10;
pub const MAX_LEN: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyExample {
    pub digits: Vec<u8>,
    pub query: (u8, u8),
    pub label: bool,
}

impl ToyExample {
    /// Builds an example and computes its label.
    pub fn new(digits: Vec<u8>, query: (u8, u8)) -> Result<Self> {
        let example = Self {
            label: false,
            digits,
            query,
        };
        example.validate()?;
        let label = label(&example);
        Ok(Self { label, ..example })
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = self.query;
        if n == m {
            return Err(Error::InvalidArgument(format!("query digits must differ, got ({n}, {m})")));
        }
        if n as usize >= NUM_DIGITS || m as usize >= NUM_DIGITS {
            return Err(Error::InvalidArgument(format!("query ({n}, {m}) out of range")));
        }
        if self.digits.is_empty() {
            return Err(Error::InvalidArgument("empty digit sequence".into()));
        }
        if let Some(d) = self.digits.iter().find(|&&d| d as usize >= NUM_DIGITS) {
            return Err(Error::InvalidArgument(format!("digit {d} out of range")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.digits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digits.is_empty()
    }

    /// Whether position `i` holds one of the query digits.
    pub fn is_query_position(&self, i: usize) -> bool {
        let d = self.digits[i];
        d == self.query.0 || d == self.query.1
    }

    /// Same query, digits restricted to `keep` (in order).
    pub fn subsequence(&self, keep: &[usize]) -> Vec<u8> {
        keep.iter().map(|&i| self.digits[i]).collect()
    }
}

/// True iff `n` occurs strictly more often than `m`.
pub fn label(example: &ToyExample) -> bool {
    count_label(&example.digits, example.query)
}

pub fn count_label(digits: &[u8], (n, m): (u8, u8)) -> bool {
    let count = |q| digits.iter().filter(|&&d| d == q).count();
    count(n) > count(m)
}

/// Uniform over positions holding `n` or `m`; uniform over all positions when
/// neither occurs.
pub fn ground_truth(example: &ToyExample) -> Vec<f64> {
    let len = example.len();
    let hits = (0..len).filter(|&i| example.is_query_position(i)).count();
    if hits == 0 {
        return vec![1.0 / len as f64; len];
    }
    (0..len)
        .map(|i| {
            if example.is_query_position(i) {
                1.0 / hits as f64
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub train: Vec<ToyExample>,
    pub validation: Vec<ToyExample>,
}

impl ToyDataset {
    /// Splits `examples`, holding out the last 10% for validation.
    pub fn from_examples(mut examples: Vec<ToyExample>) -> Result<Self> {
        if examples.len() < 10 {
            return Err(Error::InvalidArgument(format!(
                "need at least 10 examples for a validation split, got {}",
                examples.len()
            )));
        }
        let n_val = examples.len() / 10;
        let validation = examples.split_off(examples.len() - n_val);
        Ok(Self {
            train: examples,
            validation,
        })
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &ToyExample> {
        self.train.iter().chain(&self.validation)
    }

    /// Writes one JSON object per line, training examples first.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for example in self.iter() {
            serde_json::to_writer(&mut out, example)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let reader = BufReader::new(File::open(path)?);
        let mut examples = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg,
            };
            let example: ToyExample =
                serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            example.validate().map_err(|e| parse_err(e.to_string()))?;
            if label(&example) != example.label {
                return Err(parse_err("label disagrees with digit counts".into()));
            }
            examples.push(example);
        }
        Self::from_examples(examples)
    }
}

/// Draws a random example: length uniform in `1..=max_len`, each position a
/// query digit with probability 1/2 (then `n` or `m` uniformly), otherwise one
/// of the eight remaining digits uniformly.
pub fn sample_example<R: Rng>(rng: &mut R, max_len: usize) -> ToyExample {
    let n = rng.random_range(0..NUM_DIGITS as u8);
    let mut m = rng.random_range(0..NUM_DIGITS as u8 - 1);
    if m >= n {
        m += 1;
    }
    let others: Vec<u8> = (0..NUM_DIGITS as u8).filter(|&d| d != n && d != m).collect();
    let len = rng.random_range(1..=max_len);
    let digits = (0..len)
        .map(|_| {
            if rng.random_bool(0.5) {
                if rng.random_bool(0.5) {
                    n
                } else {
                    m
                }
            } else {
                others[rng.random_range(0..others.len())]
            }
        })
        .collect::<Vec<_>>();
    let label = count_label(&digits, (n, m));
    ToyExample {
        digits,
        query: (n, m),
        label,
    }
}

pub fn generate_dataset(seed: u64, size: usize, max_len: usize) -> Result<ToyDataset> {
    if size < 10 {
        return Err(Error::InvalidArgument(format!(
            "dataset size {size} leaves no validation examples (need >= 10)"
        )));
    }
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..size).map(|_| sample_example(&mut rng, max_len)).collect();
    ToyDataset::from_examples(examples)
}
