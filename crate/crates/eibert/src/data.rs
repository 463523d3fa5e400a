//! Synthetic classification task, TSV dataset persistence, and batching.
//!
//! The task is a desk-scale stand-in for a short-text classification
//! benchmark: each class owns a disjoint token group, sequences mix class
//! tokens with distractors, and the label is the majority class among the
//! class tokens present (ties go to the lowest class id).

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{Vocabulary, NUM_RESERVED};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("task error: {0}")]
    Task(String),
    #[error("dataset parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    /// Total vocabulary size including the four reserved ids.
    pub vocab_size: usize,
    pub num_classes: usize,
    pub class_tokens_per_class: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.vocab_size < self.num_classes + NUM_RESERVED {
            return Err(DataError::Task(format!(
                "vocab_size {} smaller than {} classes + {} reserved ids",
                self.vocab_size, self.num_classes, NUM_RESERVED
            )));
        }
        if self.num_classes * self.class_tokens_per_class > self.vocab_size - NUM_RESERVED {
            return Err(DataError::Task(
                "class token groups exceed the non-reserved vocabulary".into(),
            ));
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return Err(DataError::Task("invalid sequence length range".into()));
        }
        Ok(())
    }

    pub fn num_word_tokens(&self) -> usize {
        self.vocab_size - NUM_RESERVED
    }

    /// All non-reserved token strings in id order.
    pub fn word_tokens(&self) -> Vec<String> {
        (0..self.num_word_tokens()).map(|i| format!("t{i:04}")).collect()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens(self.word_tokens())
    }

    /// Class owning word-token index `w`, if any.
    fn class_of_word(&self, w: usize) -> Option<usize> {
        let c = w / self.class_tokens_per_class;
        (c < self.num_classes).then_some(c)
    }

    /// Majority class among class tokens present; ties break to the lowest
    /// class id; None when no class token occurs.
    pub fn label_of(&self, words: &[usize]) -> Option<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &w in words {
            if let Some(c) = self.class_of_word(w) {
                counts[c] += 1;
            }
        }
        let best = *counts.iter().max()?;
        if best == 0 {
            return None;
        }
        counts.iter().position(|&c| c == best)
    }

    fn gen_sequence(&self, rng: &mut ChaCha8Rng, target_class: usize) -> Vec<usize> {
        let n_class = self.num_classes * self.class_tokens_per_class;
        let n_words = self.num_word_tokens();
        let len = rng.gen_range(self.seq_len_min..=self.seq_len_max);
        for _ in 0..64 {
            let mut words = Vec::with_capacity(len);
            for _ in 0..len {
                let w = if rng.gen_bool(0.5) && n_words > n_class {
                    // distractor
                    n_class + rng.gen_range(0..n_words - n_class)
                } else if rng.gen_bool(0.55) {
                    target_class * self.class_tokens_per_class
                        + rng.gen_range(0..self.class_tokens_per_class)
                } else {
                    rng.gen_range(0..n_class)
                };
                words.push(w);
            }
            if self.label_of(&words) == Some(target_class) {
                return words;
            }
        }
        // fall back: force a decisive class token
        let mut words = vec![
            target_class * self.class_tokens_per_class,
            target_class * self.class_tokens_per_class + 1 % self.class_tokens_per_class,
        ];
        words.resize(len.max(2), target_class * self.class_tokens_per_class);
        words
    }

    /// Deterministic split generation; each split draws from its own
    /// seed-derived stream so splits are disjoint in randomness.
    pub fn generate(&self, n: usize, split: u64) -> Result<Vec<Example>, DataError> {
        self.validate()?;
        if n == 0 {
            return Err(DataError::Task("split size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e3779b97f4a7c15) ^ split);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let target = rng.gen_range(0..self.num_classes);
            let words = self.gen_sequence(&mut rng, target);
            debug_assert_eq!(self.label_of(&words), Some(target));
            out.push(Example {
                label: target,
                // word index -> vocabulary id
                tokens: words.iter().map(|&w| w + NUM_RESERVED).collect(),
            });
        }
        Ok(out)
    }
}

/// One labeled sentence, tokens as vocabulary ids (no CLS).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub label: usize,
    pub tokens: Vec<usize>,
}

/// Writes "label<TAB>space-joined-tokens" lines.
pub fn write_tsv(examples: &[Example], vocab: &Vocabulary, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for ex in examples {
        let words: Vec<&str> = ex.tokens.iter().map(|&t| vocab.token(t)).collect();
        writeln!(out, "{}\t{}", ex.label, words.join(" ")).expect("string write");
    }
    crate::pipeline::atomic_write(path, out.as_bytes())?;
    Ok(())
}

pub fn read_tsv(path: &Path, vocab: &Vocabulary) -> Result<Vec<Example>, DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (label, rest) = line.split_once('\t').ok_or_else(|| DataError::Parse {
            line: i + 1,
            msg: "missing tab separator".into(),
        })?;
        let label: usize = label.parse().map_err(|e| DataError::Parse {
            line: i + 1,
            msg: format!("bad label: {e}"),
        })?;
        let tokens = rest.split_whitespace().map(|w| vocab.id_or_unk(w)).collect();
        out.push(Example { label, tokens });
    }
    Ok(out)
}

/// Rectangular batch: CLS-prefixed, padded token ids plus mask and labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub labels: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

pub fn make_batch(examples: &[&Example], max_seq_len: usize) -> Batch {
    let batch = examples.len();
    let longest = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
    let seq = (longest + 1).min(max_seq_len);
    let mut ids = vec![crate::vocab::PAD_ID; batch * seq];
    let mut mask = vec![0u8; batch * seq];
    let mut labels = Vec::with_capacity(batch);
    for (i, ex) in examples.iter().enumerate() {
        ids[i * seq] = crate::vocab::CLS_ID;
        mask[i * seq] = 1;
        for (j, &t) in ex.tokens.iter().take(seq - 1).enumerate() {
            ids[i * seq + 1 + j] = t;
            mask[i * seq + 1 + j] = 1;
        }
        labels.push(ex.label);
    }
    Batch { ids, mask, labels, batch, seq }
}

/// Deterministic epoch shuffling.
pub fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x2545f4914f6cdd1d));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> SyntheticTask {
        SyntheticTask {
            vocab_size: 300,
            num_classes: 4,
            class_tokens_per_class: 20,
            seq_len_min: 6,
            seq_len_max: 12,
            seed: 99,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let t = task();
        assert_eq!(t.generate(50, 0).unwrap(), t.generate(50, 0).unwrap());
        assert_ne!(t.generate(50, 0).unwrap(), t.generate(50, 1).unwrap());
    }

    #[test]
    fn label_rule_pure_class_zero() {
        let t = task();
        assert_eq!(t.label_of(&[0, 1, 2]), Some(0));
        // tie between class 0 and class 1 -> lowest id
        assert_eq!(t.label_of(&[0, 20]), Some(0));
        // distractors only -> no label
        assert_eq!(t.label_of(&[100, 150]), None);
    }

    #[test]
    fn labels_are_near_uniform() {
        let t = task();
        let examples = t.generate(10_000, 0).unwrap();
        let mut counts = vec![0usize; t.num_classes];
        for e in &examples {
            counts[e.label] += 1;
        }
        for &c in &counts {
            let frac = c as f64 / 10_000.0;
            assert!((frac - 0.25).abs() < 0.05 * 0.25 + 0.02, "class fraction {frac}");
        }
    }

    #[test]
    fn every_example_has_a_class_token_and_matching_label() {
        let t = task();
        for e in t.generate(500, 2).unwrap() {
            let words: Vec<usize> = e.tokens.iter().map(|&t| t - NUM_RESERVED).collect();
            assert_eq!(t.label_of(&words), Some(e.label));
        }
    }

    #[test]
    fn undersized_vocab_is_rejected() {
        let t = SyntheticTask { vocab_size: 6, num_classes: 4, ..task() };
        assert!(t.validate().is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let t = task();
        let vocab = t.vocabulary();
        let examples = t.generate(100, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.tsv");
        write_tsv(&examples, &vocab, &path).unwrap();
        let back = read_tsv(&path, &vocab).unwrap();
        assert_eq!(examples, back);
        // byte-identical on rewrite
        let bytes1 = std::fs::read(&path).unwrap();
        write_tsv(&back, &vocab, &path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn batches_are_cls_prefixed_and_masked() {
        let ex = Example { label: 1, tokens: vec![7, 8] };
        let b = make_batch(&[&ex, &Example { label: 0, tokens: vec![9] }], 16);
        assert_eq!(b.seq, 3);
        assert_eq!(b.ids[0], crate::vocab::CLS_ID);
        assert_eq!(&b.ids[..3], &[crate::vocab::CLS_ID, 7, 8]);
        assert_eq!(&b.mask[3..], &[1, 1, 0]);
    }
}
