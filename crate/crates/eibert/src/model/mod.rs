//! Teacher and student transformer encoders, parameter-integration surgery,
//! and storage / operation-count accounting.

pub mod forward;

pub use forward::{Capture, ForwardTrace};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model spec error: {0}")]
    Spec(String),
    #[error("token id {id} out of vocabulary (size {size})")]
    Vocab { id: usize, size: usize },
    #[error("head integration error: {0}")]
    Integration(String),
    #[error("hidden-state alignment error: {0}")]
    Alignment(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub intermediate_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub share_layers: bool,
    pub factorized_embedding: bool,
    pub num_classes: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("intermediate_dim", self.intermediate_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Spec(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(ModelError::Spec(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.factorized_embedding {
            if self.embed_dim > self.hidden_dim {
                return Err(ModelError::Spec(format!(
                    "factorized embedding requires embed_dim {} <= hidden_dim {}",
                    self.embed_dim, self.hidden_dim
                )));
            }
        } else if self.embed_dim != self.hidden_dim {
            return Err(ModelError::Spec(format!(
                "without factorization embed_dim {} must equal hidden_dim {}",
                self.embed_dim, self.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

/// Linear bridge from student hidden space to teacher hidden space.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub spec: ModelSpec,
    pub token_embedding: Tensor,
    pub embed_projection: Option<Tensor>,
    pub position_embedding: Tensor,
    pub embed_ln_gamma: Tensor,
    pub embed_ln_beta: Tensor,
    /// One entry when `share_layers`, otherwise one per layer.
    pub blocks: Vec<BlockParams>,
    pub pooler_w: Tensor,
    pub pooler_b: Tensor,
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
    pub projector: Option<Projector>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Matrix,
    Vector,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, 0.02).unwrap(),
        }
    }

    /// Truncated normal, std 0.02, resampled beyond two standard deviations.
    fn tensor(&mut self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v = self.normal.sample(&mut self.rng);
                if v.abs() <= 0.04 {
                    break v;
                }
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }
}

fn zeros(n: usize) -> Tensor {
    Tensor::zeros(vec![n])
}

fn ones(n: usize) -> Tensor {
    Tensor::vector(vec![1.0; n])
}

pub fn build_model(spec: &ModelSpec) -> Result<TransformerModel, ModelError> {
    spec.validate()?;
    let mut init = Init::new(spec.seed);
    let h = spec.hidden_dim;
    let token_embedding = init.tensor(vec![spec.vocab_size, spec.embed_dim]);
    let embed_projection = spec
        .factorized_embedding
        .then(|| init.tensor(vec![spec.embed_dim, h]));
    let position_embedding = init.tensor(vec![spec.max_seq_len, h]);
    let n_blocks = if spec.share_layers { 1 } else { spec.num_layers };
    let blocks = (0..n_blocks)
        .map(|_| BlockParams {
            wq: init.tensor(vec![h, h]),
            bq: zeros(h),
            wk: init.tensor(vec![h, h]),
            bk: zeros(h),
            wv: init.tensor(vec![h, h]),
            bv: zeros(h),
            wo: init.tensor(vec![h, h]),
            bo: zeros(h),
            ln1_gamma: ones(h),
            ln1_beta: zeros(h),
            w_ff1: init.tensor(vec![h, spec.intermediate_dim]),
            b_ff1: zeros(spec.intermediate_dim),
            w_ff2: init.tensor(vec![spec.intermediate_dim, h]),
            b_ff2: zeros(h),
            ln2_gamma: ones(h),
            ln2_beta: zeros(h),
        })
        .collect();
    Ok(TransformerModel {
        pooler_w: init.tensor(vec![h, h]),
        pooler_b: zeros(h),
        classifier_w: init.tensor(vec![h, spec.num_classes]),
        classifier_b: zeros(spec.num_classes),
        projector: None,
        spec: spec.clone(),
        token_embedding,
        embed_projection,
        position_embedding,
        embed_ln_gamma: ones(h),
        embed_ln_beta: zeros(h),
        blocks,
    })
}

macro_rules! visit_block_mut {
    ($out:expr, $prefix:expr, $b:expr) => {{
        let p = $prefix;
        $out.push((format!("{p}wq"), &mut $b.wq, ParamKind::Matrix));
        $out.push((format!("{p}bq"), &mut $b.bq, ParamKind::Vector));
        $out.push((format!("{p}wk"), &mut $b.wk, ParamKind::Matrix));
        $out.push((format!("{p}bk"), &mut $b.bk, ParamKind::Vector));
        $out.push((format!("{p}wv"), &mut $b.wv, ParamKind::Matrix));
        $out.push((format!("{p}bv"), &mut $b.bv, ParamKind::Vector));
        $out.push((format!("{p}wo"), &mut $b.wo, ParamKind::Matrix));
        $out.push((format!("{p}bo"), &mut $b.bo, ParamKind::Vector));
        $out.push((format!("{p}ln1_gamma"), &mut $b.ln1_gamma, ParamKind::Vector));
        $out.push((format!("{p}ln1_beta"), &mut $b.ln1_beta, ParamKind::Vector));
        $out.push((format!("{p}w_ff1"), &mut $b.w_ff1, ParamKind::Matrix));
        $out.push((format!("{p}b_ff1"), &mut $b.b_ff1, ParamKind::Vector));
        $out.push((format!("{p}w_ff2"), &mut $b.w_ff2, ParamKind::Matrix));
        $out.push((format!("{p}b_ff2"), &mut $b.b_ff2, ParamKind::Vector));
        $out.push((format!("{p}ln2_gamma"), &mut $b.ln2_gamma, ParamKind::Vector));
        $out.push((format!("{p}ln2_beta"), &mut $b.ln2_beta, ParamKind::Vector));
    }};
}

impl TransformerModel {
    /// Block parameters for layer `l`, honoring cross-layer sharing.
    pub fn block_index(&self, layer: usize) -> usize {
        if self.spec.share_layers {
            0
        } else {
            layer
        }
    }

    /// Canonical parameter list: fixed order shared by the optimizer,
    /// checkpoints, accounting, and tape bindings.
    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Tensor, ParamKind)> {
        let mut out: Vec<(String, &mut Tensor, ParamKind)> = Vec::new();
        macro_rules! push {
            ($name:expr, $t:expr, $k:expr) => {
                out.push(($name.into(), $t, $k))
            };
        }
        push!("token_embedding", &mut self.token_embedding, ParamKind::Matrix);
        if let Some(p) = self.embed_projection.as_mut() {
            push!("embed_projection", p, ParamKind::Matrix);
        }
        push!("position_embedding", &mut self.position_embedding, ParamKind::Matrix);
        push!("embed_ln_gamma", &mut self.embed_ln_gamma, ParamKind::Vector);
        push!("embed_ln_beta", &mut self.embed_ln_beta, ParamKind::Vector);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_block_mut!(out, format!("block{i}."), *b);
        }
        push!("pooler_w", &mut self.pooler_w, ParamKind::Matrix);
        push!("pooler_b", &mut self.pooler_b, ParamKind::Vector);
        push!("classifier_w", &mut self.classifier_w, ParamKind::Matrix);
        push!("classifier_b", &mut self.classifier_b, ParamKind::Vector);
        if let Some(p) = self.projector.as_mut() {
            push!("projector_w", &mut p.weight, ParamKind::Matrix);
            push!("projector_b", &mut p.bias, ParamKind::Vector);
        }
        out
    }

    pub fn param_entries(&self) -> Vec<(String, &Tensor, ParamKind)> {
        // mirror of param_entries_mut; kept in lockstep
        let mut out: Vec<(String, &Tensor, ParamKind)> = Vec::new();
        out.push(("token_embedding".into(), &self.token_embedding, ParamKind::Matrix));
        if let Some(p) = self.embed_projection.as_ref() {
            out.push(("embed_projection".into(), p, ParamKind::Matrix));
        }
        out.push(("position_embedding".into(), &self.position_embedding, ParamKind::Matrix));
        out.push(("embed_ln_gamma".into(), &self.embed_ln_gamma, ParamKind::Vector));
        out.push(("embed_ln_beta".into(), &self.embed_ln_beta, ParamKind::Vector));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i}.");
            out.push((format!("{p}wq"), &b.wq, ParamKind::Matrix));
            out.push((format!("{p}bq"), &b.bq, ParamKind::Vector));
            out.push((format!("{p}wk"), &b.wk, ParamKind::Matrix));
            out.push((format!("{p}bk"), &b.bk, ParamKind::Vector));
            out.push((format!("{p}wv"), &b.wv, ParamKind::Matrix));
            out.push((format!("{p}bv"), &b.bv, ParamKind::Vector));
            out.push((format!("{p}wo"), &b.wo, ParamKind::Matrix));
            out.push((format!("{p}bo"), &b.bo, ParamKind::Vector));
            out.push((format!("{p}ln1_gamma"), &b.ln1_gamma, ParamKind::Vector));
            out.push((format!("{p}ln1_beta"), &b.ln1_beta, ParamKind::Vector));
            out.push((format!("{p}w_ff1"), &b.w_ff1, ParamKind::Matrix));
            out.push((format!("{p}b_ff1"), &b.b_ff1, ParamKind::Vector));
            out.push((format!("{p}w_ff2"), &b.w_ff2, ParamKind::Matrix));
            out.push((format!("{p}b_ff2"), &b.b_ff2, ParamKind::Vector));
            out.push((format!("{p}ln2_gamma"), &b.ln2_gamma, ParamKind::Vector));
            out.push((format!("{p}ln2_beta"), &b.ln2_beta, ParamKind::Vector));
        }
        out.push(("pooler_w".into(), &self.pooler_w, ParamKind::Matrix));
        out.push(("pooler_b".into(), &self.pooler_b, ParamKind::Vector));
        out.push(("classifier_w".into(), &self.classifier_w, ParamKind::Matrix));
        out.push(("classifier_b".into(), &self.classifier_b, ParamKind::Vector));
        if let Some(p) = self.projector.as_ref() {
            out.push(("projector_w".into(), &p.weight, ParamKind::Matrix));
            out.push(("projector_b".into(), &p.bias, ParamKind::Vector));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.param_entries().iter().map(|(_, t, _)| t.len()).sum()
    }

    /// Combined FNV hash of every parameter's bit pattern.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (_, t, _) in self.param_entries() {
            h = (h ^ t.bit_hash()).wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Hidden width the head (pooler) operates in; differs from
    /// `spec.hidden_dim` after integrating a wider teacher's head.
    pub fn head_width(&self) -> usize {
        self.pooler_w.shape()[0]
    }
}

/// Copies the fine-tuned teacher's pooler and classifier into the student,
/// inserting a projector when hidden widths differ. The teacher is unchanged
/// and the copied parameters remain trainable.
pub fn integrate_head(
    teacher: &TransformerModel,
    student: &mut TransformerModel,
) -> Result<(), ModelError> {
    if teacher.spec.num_classes != student.spec.num_classes {
        return Err(ModelError::Integration(format!(
            "num_classes mismatch: teacher {} vs student {}",
            teacher.spec.num_classes, student.spec.num_classes
        )));
    }
    student.pooler_w = teacher.pooler_w.clone();
    student.pooler_b = teacher.pooler_b.clone();
    student.classifier_w = teacher.classifier_w.clone();
    student.classifier_b = teacher.classifier_b.clone();
    if teacher.spec.hidden_dim != student.spec.hidden_dim {
        ensure_projector(student, teacher.spec.hidden_dim);
    }
    Ok(())
}

/// Creates the student-side projector to `target_dim` if it is missing.
pub fn ensure_projector(student: &mut TransformerModel, target_dim: usize) {
    if student.spec.hidden_dim == target_dim || student.projector.is_some() {
        return;
    }
    let mut init = Init::new(student.spec.seed ^ 0x70726f6a); // distinct stream
    student.projector = Some(Projector {
        weight: init.tensor(vec![student.spec.hidden_dim, target_dim]),
        bias: zeros(target_dim),
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StoragePrecision {
    Fp32,
    /// 1 byte per quantized weight plus 4 bytes per per-tensor step size;
    /// vectors (biases, layer norms) stay fp32.
    Int8WithFp32Steps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageBreakdown {
    pub embeddings: u64,
    pub blocks: u64,
    pub head: u64,
    pub total: u64,
}

fn component_of(name: &str) -> usize {
    if name.starts_with("block") {
        1
    } else if name.starts_with("pooler")
        || name.starts_with("classifier")
        || name.starts_with("projector")
    {
        2
    } else {
        0
    }
}

pub fn storage_bytes(model: &TransformerModel, precision: StoragePrecision) -> StorageBreakdown {
    let mut parts = [0u64; 3];
    for (name, t, kind) in model.param_entries() {
        let bytes = match (precision, kind) {
            (StoragePrecision::Fp32, _) => 4 * t.len() as u64,
            (StoragePrecision::Int8WithFp32Steps, ParamKind::Matrix) => t.len() as u64 + 4,
            (StoragePrecision::Int8WithFp32Steps, ParamKind::Vector) => 4 * t.len() as u64,
        };
        parts[component_of(&name)] += bytes;
    }
    StorageBreakdown {
        embeddings: parts[0],
        blocks: parts[1],
        head: parts[2],
        total: parts.iter().sum(),
    }
}

/// teacher_bytes / model_bytes.
pub fn compression_ratio(teacher_bytes: f64, model_bytes: f64) -> f64 {
    teacher_bytes / model_bytes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    /// Multiply-accumulates x 2 for one forward pass at the given length.
    pub total: u64,
    pub embed: u64,
    pub blocks: u64,
    pub head: u64,
}

impl OpCount {
    pub fn label(quantized: bool) -> &'static str {
        if quantized {
            "IOPs"
        } else {
            "FLOPs"
        }
    }
}

/// Closed-form operation count for one forward pass of `seq_len` tokens.
pub fn count_ops(model: &TransformerModel, seq_len: usize, _quantized: bool) -> OpCount {
    let spec = &model.spec;
    assert!(seq_len <= spec.max_seq_len, "seq_len exceeds max_seq_len");
    let s = seq_len as u64;
    let h = spec.hidden_dim as u64;
    let i = spec.intermediate_dim as u64;
    let e = spec.embed_dim as u64;
    let c = spec.num_classes as u64;

    let embed_macs = if spec.factorized_embedding { s * e * h } else { 0 };
    let per_layer = 4 * s * h * h // Q, K, V, O projections
        + s * s * h               // attention scores
        + s * s * h               // attention-weighted values
        + 2 * s * h * i; // feed-forward
    let block_macs = spec.num_layers as u64 * per_layer;
    let hw = model.head_width() as u64;
    let projector_macs = model
        .projector
        .as_ref()
        .map(|p| (p.weight.shape()[0] * p.weight.shape()[1]) as u64)
        .unwrap_or(0);
    let head_macs = projector_macs + hw * hw + hw * c;

    OpCount {
        total: 2 * (embed_macs + block_macs + head_macs),
        embed: 2 * embed_macs,
        blocks: 2 * block_macs,
        head: 2 * head_macs,
    }
}

#[cfg(test)]
pub(crate) mod golden;
#[cfg(test)]
mod tests;
