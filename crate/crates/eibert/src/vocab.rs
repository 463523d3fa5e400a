//! Tokenization, corpus-driven attention-importance scoring, top-k hard
//! token pruning, and embedding-table surgery.
//!
//! Importance accumulates attention RECEIVED by a token (column sums of the
//! attention map): the literal row-sum reading makes every occurrence
//! contribute a constant (rows sum to 1), which the degeneracy-witness test
//! documents. The literal convention stays available behind a flag.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::forward::{forward, Capture};
use crate::model::TransformerModel;
use crate::numerics::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const MASK_ID: usize = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("prune error: {0}")]
    Prune(String),
    #[error("surgery error: {0}")]
    Surgery(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tokenizer {
    Whitespace,
    /// Per-character fallback for scripts without word separators.
    Char,
}

impl Tokenizer {
    pub fn split(self, line: &str) -> Vec<String> {
        match self {
            Tokenizer::Whitespace => line.split_whitespace().map(str::to_string).collect(),
            Tokenizer::Char => line
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
        }
    }
}

/// Token strings with contiguous ids; ids 0..3 are reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        let mut v = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        for t in RESERVED_TOKENS {
            v.push(t.to_string());
        }
        v
    }

    fn push(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    /// Ids assigned by first occurrence after the reserved ids.
    pub fn build_vocab(corpus: &str, tokenizer: Tokenizer) -> Result<Self, VocabError> {
        let mut v = Self::with_reserved();
        let mut any = false;
        for line in corpus.lines() {
            for tok in tokenizer.split(line) {
                any = true;
                v.push(tok);
            }
        }
        if !any {
            return Err(VocabError::Corpus("empty corpus".into()));
        }
        Ok(v)
    }

    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut v = Self::with_reserved();
        for t in tokens {
            v.push(t);
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn encode(&self, line: &str, tokenizer: Tokenizer) -> Vec<usize> {
        tokenizer.split(line).iter().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let text = self.tokens.join("\n") + "\n";
        crate::pipeline::atomic_write(path, text.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < NUM_RESERVED
            || tokens[..NUM_RESERVED] != RESERVED_TOKENS[..]
        {
            return Err(VocabError::Corpus("vocabulary file missing reserved tokens".into()));
        }
        let mut v = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        for t in tokens {
            v.push(t.to_string());
        }
        Ok(v)
    }

    /// Vocabulary after pruning: retained tokens keep their relative order.
    pub fn apply_remap(&self, remap: &PruneRemap) -> Vocabulary {
        let mut v = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        for (old, tok) in self.tokens.iter().enumerate() {
            if remap.new_id(old).is_some() {
                v.push(tok.clone());
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttnConvention {
    /// Attention received by the token: column sums of each head map.
    Received,
    /// The literal row-sum reading; degenerate (rows sum to one).
    LiteralRowSum,
}

/// Per-token accumulated importance with occurrence counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub importance: Vec<f64>,
    pub count: Vec<u64>,
    /// Number of sentences scored (K).
    pub sentences: u64,
    /// Attention heads per map (H).
    pub heads: usize,
    /// Sentences truncated to the model's maximum length.
    pub truncated: u64,
    pub convention: AttnConvention,
}

impl ImportanceTable {
    pub fn new(vocab_size: usize, heads: usize, convention: AttnConvention) -> Self {
        ImportanceTable {
            importance: vec![0.0; vocab_size],
            count: vec![0; vocab_size],
            sentences: 0,
            heads,
            truncated: 0,
            convention,
        }
    }

    /// Accumulates one sentence given its last-layer per-head attention
    /// maps ([n x n] each). `ids` are the model-input token ids.
    pub fn accumulate_sentence(&mut self, ids: &[usize], head_maps: &[Tensor]) {
        let n = ids.len();
        assert!(head_maps.iter().all(|m| m.rows() == n && m.cols() == n));
        let inv_n = 1.0 / n as f64;
        self.sentences += 1;
        for (pos, &tok) in ids.iter().enumerate() {
            let mut acc = 0.0;
            for map in head_maps {
                match self.convention {
                    AttnConvention::Received => {
                        for i in 0..n {
                            acc += map.at(i, pos);
                        }
                    }
                    AttnConvention::LiteralRowSum => {
                        for j in 0..n {
                            acc += map.at(pos, j);
                        }
                    }
                }
            }
            self.importance[tok] += inv_n * acc;
            self.count[tok] += 1;
        }
    }

    /// Adds another table into this one (shard merge).
    pub fn merge(&mut self, other: &ImportanceTable) {
        assert_eq!(self.importance.len(), other.importance.len());
        assert_eq!(self.convention, other.convention);
        for (a, b) in self.importance.iter_mut().zip(&other.importance) {
            *a += b;
        }
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
        self.sentences += other.sentences;
        self.truncated += other.truncated;
    }

    /// UTF-8 TSV "token<TAB>id<TAB>importance<TAB>count", importance
    /// descending then id ascending.
    pub fn to_tsv(&self, vocab: &Vocabulary) -> String {
        let mut order: Vec<usize> = (0..self.importance.len()).collect();
        order.sort_by(|&a, &b| {
            self.importance[b]
                .partial_cmp(&self.importance[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut out = String::new();
        for id in order {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                vocab.token(id),
                id,
                self.importance[id],
                self.count[id]
            )
            .expect("string write");
        }
        out
    }
}

/// Scores every sentence with the model's last-layer attention. Sentences
/// longer than the model's max length are truncated (counted in metadata).
/// The corpus is sharded across threads; shard tables merge by addition in
/// shard order.
pub fn score_importance(
    model: &TransformerModel,
    sentences: &[Vec<usize>],
    convention: AttnConvention,
) -> Result<ImportanceTable, VocabError> {
    if sentences.is_empty() || sentences.iter().any(|s| s.is_empty()) {
        return Err(VocabError::Corpus("importance scoring needs non-empty sentences".into()));
    }
    let heads = model.spec.num_heads;
    let vocab_size = model.spec.vocab_size;
    let shard_size = sentences.len().div_ceil(rayon::current_num_threads().max(1));
    let shards: Vec<ImportanceTable> = sentences
        .par_chunks(shard_size.max(1))
        .map(|shard| {
            let mut table = ImportanceTable::new(vocab_size, heads, convention);
            for sent in shard {
                let mut ids = sent.clone();
                if ids.len() > model.spec.max_seq_len {
                    ids.truncate(model.spec.max_seq_len);
                    table.truncated += 1;
                }
                let n = ids.len();
                let mask = vec![1u8; n];
                let trace = forward(
                    model,
                    &ids,
                    &mask,
                    1,
                    n,
                    Capture { attention: true, ..Default::default() },
                )
                .expect("importance scoring forward failed");
                let attention = trace.attention.expect("attention capture requested");
                let last_layer = attention.last().expect("model has at least one layer");
                table.accumulate_sentence(&ids, &last_layer[0]);
            }
            table
        })
        .collect();
    let mut total = ImportanceTable::new(vocab_size, heads, convention);
    for shard in &shards {
        total.merge(shard);
    }
    Ok(total)
}

/// Old-id to new-id map for retained tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneRemap {
    new_of_old: Vec<Option<usize>>,
    pub retained: usize,
    pub clamped: bool,
}

impl PruneRemap {
    pub fn new_id(&self, old: usize) -> Option<usize> {
        self.new_of_old.get(old).copied().flatten()
    }

    pub fn old_vocab_size(&self) -> usize {
        self.new_of_old.len()
    }

    pub fn is_identity(&self) -> bool {
        self.retained == self.new_of_old.len()
    }

    /// Encodes an old id after pruning; dropped tokens map to UNK.
    pub fn encode(&self, old: usize) -> usize {
        self.new_id(old)
            .unwrap_or_else(|| self.new_id(UNK_ID).expect("UNK always retained"))
    }
}

/// Retains the k highest-importance tokens (reserved ids always retained,
/// counted inside k); ties break to the lower original id. The remap is
/// dense and order-preserving among retained ids.
pub fn select_topk(table: &ImportanceTable, k: usize) -> Result<PruneRemap, VocabError> {
    let v = table.importance.len();
    if k < NUM_RESERVED {
        return Err(VocabError::Prune(format!(
            "k = {k} smaller than the {NUM_RESERVED} reserved ids"
        )));
    }
    let clamped = k > v;
    let k = k.min(v);
    let mut order: Vec<usize> = (NUM_RESERVED..v).collect();
    order.sort_by(|&a, &b| {
        table.importance[b]
            .partial_cmp(&table.importance[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; v];
    for id in 0..NUM_RESERVED {
        keep[id] = true;
    }
    for &id in order.iter().take(k - NUM_RESERVED) {
        keep[id] = true;
    }
    let mut new_of_old = vec![None; v];
    let mut next = 0;
    for (old, slot) in new_of_old.iter_mut().enumerate() {
        if keep[old] {
            *slot = Some(next);
            next += 1;
        }
    }
    Ok(PruneRemap { new_of_old, retained: next, clamped })
}

/// Deletes pruned rows from the embedding table and updates the model's
/// vocabulary size; every other parameter is untouched.
pub fn apply_prune(model: &mut TransformerModel, remap: &PruneRemap) -> Result<(), VocabError> {
    if remap.old_vocab_size() != model.spec.vocab_size {
        return Err(VocabError::Surgery(format!(
            "remap built for vocab {} but model has {}",
            remap.old_vocab_size(),
            model.spec.vocab_size
        )));
    }
    let cols = model.token_embedding.cols();
    let mut data = Vec::with_capacity(remap.retained * cols);
    for old in 0..remap.old_vocab_size() {
        if remap.new_id(old).is_some() {
            data.extend_from_slice(model.token_embedding.row(old));
        }
    }
    model.token_embedding = Tensor::matrix(remap.retained, cols, data)
        .map_err(|e| VocabError::Surgery(e.to_string()))?;
    model.spec.vocab_size = remap.retained;
    Ok(())
}
