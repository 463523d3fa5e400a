//! Pipeline orchestration: on-disk checkpoint format, stage configuration,
//! artifact wiring, metrics fragments, and the end-to-end compression
//! ladder.
//!
//! Every stage reads its inputs from disk and writes its outputs
//! atomically, so re-running a stage is deterministic and idempotent:
//! checkpoints store parameters as f32, which makes the on-disk form the
//! canonical one.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Once;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{read_tsv, write_tsv, DataError, Example, SyntheticTask};
use crate::distill::{
    eval_accuracy, finetune_teacher, pretrain_student_mlm, run_distillation, task_history_csv,
    task_step, Adam, AdamHyper, DistillError, DistillMode, DistillPlan, MlmConfig,
};
use crate::model::{
    build_model, count_ops, storage_bytes, ModelError, ModelSpec, Projector, StoragePrecision,
    TransformerModel,
};
use crate::numerics::{set_precision, IntTensor, NumericsError, Precision, Tensor};
use crate::quant::{
    quantize_model, quantized_forward, report_csv, QuantConfig, QuantError, QuantRunMode,
    QuantizedModel,
};
use crate::vocab::{
    apply_prune, score_importance, select_topk, AttnConvention, VocabError, Vocabulary,
    CLS_ID, NUM_RESERVED,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input {path}: run the `{stage}` stage first")]
    Dependency { stage: String, path: PathBuf },
    #[error("checkpoint format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("stage failed: {0}")]
    Train(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    /// CLI exit code: 2 config, 3 missing dependency, 4 bad checkpoint,
    /// 5 runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Json(_) => 2,
            PipelineError::Dependency { .. } => 3,
            PipelineError::Format { .. } => 4,
            PipelineError::Train(_) | PipelineError::Io(_) => 5,
        }
    }
}

macro_rules! train_error_from {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Train(e.to_string())
            }
        }
    )*};
}
train_error_from!(ModelError, DistillError, QuantError, VocabError, DataError, NumericsError);

/// Writes via a sibling temp file plus rename, so readers never observe a
/// partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{ext}.tmp"),
        None => "tmp".to_string(),
    });
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

/// Caps the global thread pool from `EIB_THREADS` (first caller wins).
pub fn init_threads() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        if let Ok(n) = std::env::var("EIB_THREADS") {
            if let Ok(n) = n.parse::<usize>() {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------
//
// magic "EIBT" | u32 version LE | u64 header-length LE | JSON header | blob
//
// The header lists every tensor with dtype (f32 or i8), shape, and byte
// offset into the blob; i8 tensors carry their dequantization step.

const MAGIC: &[u8; 4] = b"EIBT";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    /// f32 bit pattern of the dequantization step (bit-exact round trip).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step_bits: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    spec: ModelSpec,
    tensors: Vec<TensorMeta>,
    /// Activation scales as f64 bit patterns (bit-exact round trip).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    act_scale_bits: Vec<(String, u64)>,
}

fn f32_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * t.len());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn encode_checkpoint(header: &mut CheckpointHeader, blobs: Vec<Vec<u8>>) -> Result<Vec<u8>, PipelineError> {
    let mut offset = 0u64;
    for (meta, blob) in header.tensors.iter_mut().zip(&blobs) {
        meta.offset = offset;
        offset += blob.len() as u64;
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for blob in blobs {
        out.extend_from_slice(&blob);
    }
    Ok(out)
}

pub fn save_model(path: &Path, model: &TransformerModel) -> Result<(), PipelineError> {
    let mut tensors = Vec::new();
    let mut blobs = Vec::new();
    for (name, t, _) in model.param_entries() {
        tensors.push(TensorMeta {
            name,
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset: 0,
            step_bits: None,
        });
        blobs.push(f32_bytes(t));
    }
    let mut header = CheckpointHeader {
        kind: "model".into(),
        spec: model.spec.clone(),
        tensors,
        act_scale_bits: Vec::new(),
    };
    let bytes = encode_checkpoint(&mut header, blobs)?;
    atomic_write(path, &bytes)?;
    Ok(())
}

pub fn save_quantized(path: &Path, qm: &QuantizedModel) -> Result<(), PipelineError> {
    let mut tensors = Vec::new();
    let mut blobs = Vec::new();
    for (name, t, _) in qm.model.param_entries() {
        match (qm.code(&name), qm.step(&name)) {
            (Some(codes), Some(step)) => {
                // the stored step is the f32 form the accounting assumes
                tensors.push(TensorMeta {
                    name,
                    dtype: "i8".into(),
                    shape: t.shape().to_vec(),
                    offset: 0,
                    step_bits: Some((step as f32).to_bits()),
                });
                blobs.push(codes.data().iter().map(|&c| c as u8).collect());
            }
            _ => {
                tensors.push(TensorMeta {
                    name,
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset: 0,
                    step_bits: None,
                });
                blobs.push(f32_bytes(t));
            }
        }
    }
    let mut header = CheckpointHeader {
        kind: "quantized".into(),
        spec: qm.model.spec.clone(),
        tensors,
        act_scale_bits: qm.act_scales.iter().map(|(n, s)| (n.clone(), s.to_bits())).collect(),
    };
    let bytes = encode_checkpoint(&mut header, blobs)?;
    atomic_write(path, &bytes)?;
    Ok(())
}

struct RawCheckpoint {
    header: CheckpointHeader,
    blob: Vec<u8>,
    blob_base: u64,
}

fn read_checkpoint(path: &Path) -> Result<RawCheckpoint, PipelineError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 {
        return Err(PipelineError::Format {
            offset: bytes.len() as u64,
            msg: "file shorter than the fixed header".into(),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(PipelineError::Format { offset: 0, msg: "bad magic".into() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(PipelineError::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + hlen {
        return Err(PipelineError::Format {
            offset: bytes.len() as u64,
            msg: "truncated header".into(),
        });
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + hlen])
        .map_err(|e| PipelineError::Format { offset: 16, msg: format!("bad header json: {e}") })?;
    let blob = bytes[16 + hlen..].to_vec();
    let expected: u64 = header
        .tensors
        .iter()
        .map(|t| {
            let n: usize = t.shape.iter().product();
            match t.dtype.as_str() {
                "i8" => n as u64,
                _ => 4 * n as u64,
            }
        })
        .sum();
    if blob.len() as u64 != expected {
        return Err(PipelineError::Format {
            offset: (16 + hlen) as u64 + blob.len() as u64,
            msg: format!("blob holds {} bytes, header promises {expected}", blob.len()),
        });
    }
    Ok(RawCheckpoint { header, blob, blob_base: (16 + hlen) as u64 })
}

enum LoadedTensor {
    F32(Tensor),
    I8(IntTensor, f64),
}

fn decode_tensors(raw: &RawCheckpoint) -> Result<Vec<(String, LoadedTensor)>, PipelineError> {
    let mut out = Vec::new();
    for meta in &raw.header.tensors {
        let n: usize = meta.shape.iter().product();
        let start = meta.offset as usize;
        match meta.dtype.as_str() {
            "f32" => {
                let end = start + 4 * n;
                let data: Vec<f64> = raw.blob[start..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect();
                let t = Tensor::new(meta.shape.clone(), data).map_err(|e| PipelineError::Format {
                    offset: raw.blob_base + meta.offset,
                    msg: e.to_string(),
                })?;
                out.push((meta.name.clone(), LoadedTensor::F32(t)));
            }
            "i8" => {
                let end = start + n;
                let data: Vec<i8> = raw.blob[start..end].iter().map(|&b| b as i8).collect();
                let t =
                    IntTensor::new(meta.shape.clone(), data).map_err(|e| PipelineError::Format {
                        offset: raw.blob_base + meta.offset,
                        msg: e.to_string(),
                    })?;
                let step = meta.step_bits.map(|b| f32::from_bits(b) as f64).ok_or_else(|| PipelineError::Format {
                    offset: raw.blob_base + meta.offset,
                    msg: format!("i8 tensor {} missing its step", meta.name),
                })?;
                out.push((meta.name.clone(), LoadedTensor::I8(t, step)));
            }
            other => {
                return Err(PipelineError::Format {
                    offset: raw.blob_base + meta.offset,
                    msg: format!("unknown dtype {other}"),
                })
            }
        }
    }
    Ok(out)
}

/// Rebuilds a model from its spec plus the stored tensors; pooler shapes and
/// the optional projector come from the file, not from `ModelSpec` defaults.
fn assemble_model(
    spec: &ModelSpec,
    tensors: Vec<(String, Tensor)>,
) -> Result<TransformerModel, PipelineError> {
    let mut map: HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut model = build_model(spec)
        .map_err(|e| PipelineError::Format { offset: 16, msg: format!("invalid stored spec: {e}") })?;
    if map.contains_key("projector_w") {
        model.projector = Some(Projector {
            weight: Tensor::scalar(0.0),
            bias: Tensor::scalar(0.0),
        });
    }
    for (name, t, _) in model.param_entries_mut() {
        let stored = map.remove(&name).ok_or_else(|| PipelineError::Format {
            offset: 16,
            msg: format!("checkpoint missing tensor {name}"),
        })?;
        *t = stored;
    }
    if let Some(extra) = map.keys().next() {
        return Err(PipelineError::Format {
            offset: 16,
            msg: format!("checkpoint has unexpected tensor {extra}"),
        });
    }
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<TransformerModel, PipelineError> {
    let raw = read_checkpoint(path)?;
    if raw.header.kind != "model" {
        return Err(PipelineError::Format {
            offset: 16,
            msg: format!("expected a model checkpoint, found {:?}", raw.header.kind),
        });
    }
    let tensors = decode_tensors(&raw)?
        .into_iter()
        .map(|(n, t)| match t {
            LoadedTensor::F32(t) => Ok((n, t)),
            LoadedTensor::I8(..) => Err(PipelineError::Format {
                offset: 16,
                msg: format!("unexpected i8 tensor {n} in a model checkpoint"),
            }),
        })
        .collect::<Result<Vec<_>, _>>()?;
    assemble_model(&raw.header.spec, tensors)
}

pub fn load_quantized(path: &Path) -> Result<QuantizedModel, PipelineError> {
    let raw = read_checkpoint(path)?;
    if raw.header.kind != "quantized" {
        return Err(PipelineError::Format {
            offset: 16,
            msg: format!("expected a quantized checkpoint, found {:?}", raw.header.kind),
        });
    }
    let mut codes = Vec::new();
    let mut steps = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in decode_tensors(&raw)? {
        match t {
            LoadedTensor::F32(t) => tensors.push((name, t)),
            LoadedTensor::I8(q, step) => {
                tensors.push((name.clone(), q.dequantize(step)));
                codes.push((name.clone(), q));
                steps.push((name, step));
            }
        }
    }
    let model = assemble_model(&raw.header.spec, tensors)?;
    let act_scales = raw
        .header
        .act_scale_bits
        .iter()
        .map(|(n, b)| (n.clone(), f64::from_bits(*b)))
        .collect();
    Ok(QuantizedModel { model, codes, steps, act_scales })
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    /// Retained vocabulary size (reserved ids included).
    pub keep: usize,
    pub convention: AttnConvention,
    /// Task-recovery updates after the embedding surgery (0 disables).
    pub recovery_steps: usize,
    pub recovery_lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum StageOrder {
    /// distill, then prune (with recovery), then quantize.
    #[default]
    #[serde(rename = "default")]
    DistillPruneQuantize,
    /// prune first (teacher-scored), then distill, then quantize.
    #[serde(rename = "prune-first")]
    PruneDistillQuantize,
}

impl FromStr for StageOrder {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(StageOrder::DistillPruneQuantize),
            "prune-first" => Ok(StageOrder::PruneDistillQuantize),
            other => Err(format!("unknown stage order {other:?} (expected default|prune-first)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub seed: u64,
    /// "f64" or "f32".
    pub precision: String,
    pub task: SyntheticTask,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub calib_examples: usize,
    /// Sequence length used for operation-count accounting.
    pub eval_seq_len: usize,
    pub teacher: ModelSpec,
    pub student: ModelSpec,
    pub pretrain: MlmConfig,
    pub finetune: FinetuneConfig,
    pub distill: DistillPlan,
    pub prune: PruneConfig,
    pub quant: QuantConfig,
    #[serde(default)]
    pub stage_order: StageOrder,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.version != 1 {
            return Err(PipelineError::Config(format!(
                "unsupported config version {}",
                self.version
            )));
        }
        Precision::from_str(&self.precision)
            .map_err(|e| PipelineError::Config(e))?;
        self.task.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.teacher.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.student.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        for (who, spec) in [("teacher", &self.teacher), ("student", &self.student)] {
            if spec.vocab_size != self.task.vocab_size {
                return Err(PipelineError::Config(format!(
                    "{who} vocab_size {} does not match the task's {}",
                    spec.vocab_size, self.task.vocab_size
                )));
            }
            if spec.num_classes != self.task.num_classes {
                return Err(PipelineError::Config(format!(
                    "{who} num_classes {} does not match the task's {}",
                    spec.num_classes, self.task.num_classes
                )));
            }
        }
        self.distill.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.quant.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.prune.keep < NUM_RESERVED {
            return Err(PipelineError::Config(format!(
                "prune.keep {} below the {NUM_RESERVED} reserved ids",
                self.prune.keep
            )));
        }
        if self.train_examples == 0 || self.eval_examples == 0 || self.calib_examples == 0 {
            return Err(PipelineError::Config("split sizes must be positive".into()));
        }
        if self.eval_seq_len == 0 || self.eval_seq_len > self.student.max_seq_len {
            return Err(PipelineError::Config("eval_seq_len outside the model range".into()));
        }
        Ok(())
    }

    /// Re-derives every stage seed from one root seed.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.task.seed = seed;
        self.teacher.seed = seed ^ 0x7465616368; // distinct streams per role
        self.student.seed = seed ^ 0x73747564;
        self.pretrain.seed = seed ^ 0x6d6c6d32;
        self.distill.seed = seed ^ 0x64697374;
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Small defaults sized for a workstation run of the full ladder.
    pub fn desk_default() -> Self {
        PipelineConfig {
            version: 1,
            seed: 17,
            precision: "f64".into(),
            task: SyntheticTask {
                vocab_size: 2000,
                num_classes: 4,
                class_tokens_per_class: 120,
                seq_len_min: 8,
                seq_len_max: 14,
                seed: 17,
            },
            train_examples: 2000,
            eval_examples: 500,
            calib_examples: 256,
            eval_seq_len: 16,
            teacher: ModelSpec {
                vocab_size: 2000,
                max_seq_len: 16,
                embed_dim: 256,
                hidden_dim: 256,
                intermediate_dim: 512,
                num_layers: 4,
                num_heads: 4,
                share_layers: false,
                factorized_embedding: false,
                num_classes: 4,
                seed: 1,
            },
            student: ModelSpec {
                vocab_size: 2000,
                max_seq_len: 16,
                embed_dim: 64,
                hidden_dim: 64,
                intermediate_dim: 256,
                num_layers: 2,
                num_heads: 4,
                share_layers: true,
                factorized_embedding: false,
                num_classes: 4,
                seed: 2,
            },
            pretrain: MlmConfig {
                epochs: 2,
                batch_size: 16,
                lr: 1e-3,
                mask_prob: 0.15,
                seed: 3,
                max_steps: Some(200),
            },
            finetune: FinetuneConfig { epochs: 3, lr: 1e-4, batch_size: 16, max_steps: Some(400) },
            distill: DistillPlan {
                mode: DistillMode::CrossKd,
                epochs: 3,
                batch_size: 16,
                lambda_teacher: 1e-6,
                lambda_student: 1e-4,
                beta_mse: 1.0,
                beta_kl: 1.0,
                temperature: 1.0,
                seed: 4,
                freeze_integrated_head: false,
                swap_order: false,
                max_steps_per_epoch: None,
            },
            prune: PruneConfig {
                keep: 1000,
                convention: AttnConvention::Received,
                recovery_steps: 200,
                recovery_lr: 1e-4,
            },
            quant: QuantConfig::default(),
            stage_order: StageOrder::default(),
        }
    }
}

// ---------------------------------------------------------------------------
// Stage orchestration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMetrics {
    pub name: String,
    pub params: u64,
    pub bytes: u64,
    /// Operations for one forward pass at the configured accounting length.
    pub ops: u64,
    pub acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_int: Option<f64>,
    pub ratio_vs_teacher: f64,
}

pub fn mode_slug(mode: DistillMode) -> &'static str {
    match mode {
        DistillMode::Kd => "kd",
        DistillMode::PiKd => "pi-kd",
        DistillMode::CrossKd => "cross-kd",
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub out: PathBuf,
}

/// Removes the advisory lock on drop.
struct StageLock(PathBuf);

impl Drop for StageLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        config.validate()?;
        let out = out.into();
        std::fs::create_dir_all(out.join("metrics"))?;
        set_precision(Precision::from_str(&config.precision).map_err(PipelineError::Config)?);
        Ok(Pipeline { config, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str, stage: &str) -> Result<PathBuf, PipelineError> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::Dependency { stage: stage.into(), path: p })
        }
    }

    fn lock(&self) -> Result<StageLock, PipelineError> {
        let p = self.path(".lock");
        if p.exists() {
            return Err(PipelineError::Config(format!(
                "output directory is locked by {}; remove it if no other run is active",
                p.display()
            )));
        }
        std::fs::write(&p, format!("{}\n", std::process::id()))?;
        Ok(StageLock(p))
    }

    fn write_metrics(&self, m: &ArtifactMetrics) -> Result<(), PipelineError> {
        let path = self.out.join("metrics").join(format!("{}.json", m.name));
        atomic_write(&path, &serde_json::to_vec_pretty(m)?)?;
        Ok(())
    }

    fn teacher_fp32_bytes(&self) -> Result<u64, PipelineError> {
        let teacher = build_model(&self.config.teacher)?;
        Ok(storage_bytes(&teacher, StoragePrecision::Fp32).total)
    }

    fn vocabulary(&self) -> Result<Vocabulary, PipelineError> {
        let p = self.require("vocab.txt", "gen-data")?;
        Ok(Vocabulary::load(&p)?)
    }

    /// Vocabulary matching a checkpoint's vocab size: the original for full
    /// models, the pruned one after embedding surgery.
    fn vocabulary_for(&self, vocab_size: usize) -> Result<Vocabulary, PipelineError> {
        if vocab_size == self.config.task.vocab_size {
            self.vocabulary()
        } else {
            let p = self.require("vocab_pruned.txt", "prune")?;
            Ok(Vocabulary::load(&p)?)
        }
    }

    fn read_split(&self, name: &str, vocab: &Vocabulary) -> Result<Vec<Example>, PipelineError> {
        let p = self.require(name, "gen-data")?;
        Ok(read_tsv(&p, vocab)?)
    }

    pub fn gen_data(&self) -> Result<(), PipelineError> {
        let task = &self.config.task;
        let vocab = task.vocabulary();
        vocab.save(&self.path("vocab.txt"))?;
        for (name, n, split) in [
            ("train.tsv", self.config.train_examples, 0u64),
            ("eval.tsv", self.config.eval_examples, 1),
            ("calib.tsv", self.config.calib_examples, 2),
        ] {
            let examples = task.generate(n, split)?;
            write_tsv(&examples, &vocab, &self.path(name))?;
        }
        Ok(())
    }

    pub fn finetune_teacher(&self) -> Result<(), PipelineError> {
        let vocab = self.vocabulary()?;
        let train = self.read_split("train.tsv", &vocab)?;
        let eval = self.read_split("eval.tsv", &vocab)?;
        let mut teacher = build_model(&self.config.teacher)?;
        let f = &self.config.finetune;
        let history = finetune_teacher(
            &mut teacher,
            &train,
            &eval,
            f.epochs,
            f.lr,
            f.batch_size,
            self.config.seed ^ 0x66742d74,
            f.max_steps,
        )?;
        save_model(&self.path("teacher.eibt"), &teacher)?;
        atomic_write(&self.path("finetune_history.csv"), task_history_csv(&history).as_bytes())?;
        let teacher = load_model(&self.path("teacher.eibt"))?;
        self.record_model_metrics("teacher", &teacher, &eval)?;
        Ok(())
    }

    pub fn pretrain(&self) -> Result<(), PipelineError> {
        let vocab = self.vocabulary()?;
        let train = self.read_split("train.tsv", &vocab)?;
        let mut student = build_model(&self.config.student)?;
        let history = pretrain_student_mlm(&mut student, &train, &self.config.pretrain)?;
        save_model(&self.path("student_pretrained.eibt"), &student)?;
        atomic_write(&self.path("pretrain_history.csv"), task_history_csv(&history).as_bytes())?;
        Ok(())
    }

    /// Student checkpoint the distill stage starts from, per stage order.
    fn distill_inputs(&self) -> Result<(TransformerModel, TransformerModel, Vocabulary), PipelineError> {
        match self.config.stage_order {
            StageOrder::DistillPruneQuantize => {
                let teacher = load_model(&self.require("teacher.eibt", "finetune-teacher")?)?;
                let student = load_model(&self.require("student_pretrained.eibt", "pretrain")?)?;
                let vocab = self.vocabulary()?;
                Ok((teacher, student, vocab))
            }
            StageOrder::PruneDistillQuantize => {
                let teacher = load_model(&self.require("teacher_pruned.eibt", "prune")?)?;
                let student =
                    load_model(&self.require("student_pretrained_pruned.eibt", "prune")?)?;
                let vocab = self.vocabulary_for(student.spec.vocab_size)?;
                Ok((teacher, student, vocab))
            }
        }
    }

    pub fn distill(&self, mode: Option<DistillMode>) -> Result<(), PipelineError> {
        let (mut teacher, mut student, vocab) = self.distill_inputs()?;
        let train = self.read_split("train.tsv", &vocab)?;
        let eval = self.read_split("eval.tsv", &vocab)?;
        let mut plan = self.config.distill.clone();
        if let Some(m) = mode {
            plan.mode = m;
        }
        let history = run_distillation(&mut teacher, &mut student, &train, &eval, &plan)?;
        let slug = mode_slug(plan.mode);
        save_model(&self.path(&format!("student_{slug}.eibt")), &student)?;
        atomic_write(
            &self.path(&format!("distill_history_{slug}.csv")),
            history.to_csv().as_bytes(),
        )?;
        let student = load_model(&self.path(&format!("student_{slug}.eibt")))?;
        self.record_model_metrics(&format!("student_{slug}"), &student, &eval)?;
        Ok(())
    }

    /// Calibration sentences as model inputs (leading classifier token).
    fn calib_sentences(&self, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>, PipelineError> {
        let calib = self.read_split("calib.tsv", vocab)?;
        Ok(calib
            .iter()
            .map(|e| {
                let mut ids = vec![CLS_ID];
                ids.extend(&e.tokens);
                ids
            })
            .collect())
    }

    pub fn prune(&self, mode: Option<DistillMode>) -> Result<(), PipelineError> {
        let vocab = self.vocabulary()?;
        let sentences = self.calib_sentences(&vocab)?;
        match self.config.stage_order {
            StageOrder::DistillPruneQuantize => {
                let slug = mode_slug(mode.unwrap_or(self.config.distill.mode));
                let input = self.require(&format!("student_{slug}.eibt"), "distill")?;
                let mut student = load_model(&input)?;
                let table =
                    score_importance(&student, &sentences, self.config.prune.convention)?;
                atomic_write(&self.path("importance.tsv"), table.to_tsv(&vocab).as_bytes())?;
                let remap = select_topk(&table, self.config.prune.keep)?;
                apply_prune(&mut student, &remap)?;
                let pruned_vocab = vocab.apply_remap(&remap);
                pruned_vocab.save(&self.path("vocab_pruned.txt"))?;
                if self.config.prune.recovery_steps > 0 {
                    let train = self.read_split("train.tsv", &pruned_vocab)?;
                    self.recover(&mut student, &train)?;
                }
                save_model(&self.path(&format!("student_{slug}_pruned.eibt")), &student)?;
                let student = load_model(&self.path(&format!("student_{slug}_pruned.eibt")))?;
                let eval = self.read_split("eval.tsv", &pruned_vocab)?;
                self.record_model_metrics(&format!("student_{slug}_pruned"), &student, &eval)?;
            }
            StageOrder::PruneDistillQuantize => {
                let teacher = load_model(&self.require("teacher.eibt", "finetune-teacher")?)?;
                let mut teacher = teacher;
                let mut student =
                    load_model(&self.require("student_pretrained.eibt", "pretrain")?)?;
                let table =
                    score_importance(&teacher, &sentences, self.config.prune.convention)?;
                atomic_write(&self.path("importance.tsv"), table.to_tsv(&vocab).as_bytes())?;
                let remap = select_topk(&table, self.config.prune.keep)?;
                apply_prune(&mut teacher, &remap)?;
                apply_prune(&mut student, &remap)?;
                vocab.apply_remap(&remap).save(&self.path("vocab_pruned.txt"))?;
                save_model(&self.path("teacher_pruned.eibt"), &teacher)?;
                save_model(&self.path("student_pretrained_pruned.eibt"), &student)?;
            }
        }
        Ok(())
    }

    /// Short task fine-tuning after embedding surgery.
    fn recover(&self, model: &mut TransformerModel, train: &[Example]) -> Result<(), PipelineError> {
        let mut adam = Adam::new(model, AdamHyper::default());
        let order = crate::data::shuffled_indices(train.len(), self.config.seed ^ 0x726563, 0);
        let bs = self.config.finetune.batch_size;
        let mut done = 0;
        'outer: loop {
            for chunk in order.chunks(bs) {
                if done >= self.config.prune.recovery_steps {
                    break 'outer;
                }
                let exs: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
                let batch = crate::data::make_batch(&exs, model.spec.max_seq_len);
                task_step(model, &batch, self.config.prune.recovery_lr, &mut adam)?;
                done += 1;
            }
        }
        Ok(())
    }

    pub fn quantize(&self, mode: Option<DistillMode>) -> Result<(), PipelineError> {
        let slug = mode_slug(mode.unwrap_or(self.config.distill.mode));
        let (input, out_name) = match self.config.stage_order {
            StageOrder::DistillPruneQuantize => (
                self.require(&format!("student_{slug}_pruned.eibt"), "prune")?,
                format!("student_{slug}_quant.eibt"),
            ),
            StageOrder::PruneDistillQuantize => (
                self.require(&format!("student_{slug}.eibt"), "distill")?,
                format!("student_{slug}_quant.eibt"),
            ),
        };
        let student = load_model(&input)?;
        let vocab = self.vocabulary_for(student.spec.vocab_size)?;
        let calib = self.read_split("calib.tsv", &vocab)?;
        let (qm, reports) = quantize_model(&student, &calib, &self.config.quant)?;
        save_quantized(&self.path(&out_name), &qm)?;
        atomic_write(&self.path("quant_report.csv"), report_csv(&reports).as_bytes())?;
        let qm = load_quantized(&self.path(&out_name))?;
        let eval = self.read_split("eval.tsv", &vocab)?;
        self.record_quant_metrics(&format!("student_{slug}_quant"), &qm, &eval)?;
        Ok(())
    }

    fn record_model_metrics(
        &self,
        name: &str,
        model: &TransformerModel,
        eval: &[Example],
    ) -> Result<(), PipelineError> {
        let bytes = storage_bytes(model, StoragePrecision::Fp32).total;
        let teacher_bytes = self.teacher_fp32_bytes()?;
        let m = ArtifactMetrics {
            name: name.into(),
            params: model.parameter_count() as u64,
            bytes,
            ops: count_ops(model, self.config.eval_seq_len.min(model.spec.max_seq_len), false)
                .total,
            acc: eval_accuracy(model, eval, 32),
            acc_int: None,
            ratio_vs_teacher: teacher_bytes as f64 / bytes as f64,
        };
        self.write_metrics(&m)
    }

    fn record_quant_metrics(
        &self,
        name: &str,
        qm: &QuantizedModel,
        eval: &[Example],
    ) -> Result<(), PipelineError> {
        let bytes = qm.storage().total;
        let teacher_bytes = self.teacher_fp32_bytes()?;
        let acc = quantized_accuracy(qm, eval, QuantRunMode::FloatSim)?;
        let acc_int = quantized_accuracy(qm, eval, QuantRunMode::Integer)?;
        let m = ArtifactMetrics {
            name: name.into(),
            params: qm.model.parameter_count() as u64,
            bytes,
            ops: count_ops(
                &qm.model,
                self.config.eval_seq_len.min(qm.model.spec.max_seq_len),
                true,
            )
            .total,
            acc,
            acc_int: Some(acc_int),
            ratio_vs_teacher: teacher_bytes as f64 / bytes as f64,
        };
        self.write_metrics(&m)
    }

    pub fn eval(&self) -> Result<(), PipelineError> {
        let mut any = false;
        if self.path("teacher.eibt").exists() {
            let teacher = load_model(&self.path("teacher.eibt"))?;
            let vocab = self.vocabulary()?;
            let eval = self.read_split("eval.tsv", &vocab)?;
            self.record_model_metrics("teacher", &teacher, &eval)?;
            any = true;
        }
        for mode in [DistillMode::Kd, DistillMode::PiKd, DistillMode::CrossKd] {
            let slug = mode_slug(mode);
            for suffix in ["", "_pruned"] {
                let name = format!("student_{slug}{suffix}");
                let p = self.path(&format!("{name}.eibt"));
                if p.exists() {
                    let model = load_model(&p)?;
                    let vocab = self.vocabulary_for(model.spec.vocab_size)?;
                    let eval = self.read_split("eval.tsv", &vocab)?;
                    self.record_model_metrics(&name, &model, &eval)?;
                    any = true;
                }
            }
            let name = format!("student_{slug}_quant");
            let p = self.path(&format!("{name}.eibt"));
            if p.exists() {
                let qm = load_quantized(&p)?;
                let vocab = self.vocabulary_for(qm.model.spec.vocab_size)?;
                let eval = self.read_split("eval.tsv", &vocab)?;
                self.record_quant_metrics(&name, &qm, &eval)?;
                any = true;
            }
        }
        if !any {
            return Err(PipelineError::Dependency {
                stage: "finetune-teacher or distill".into(),
                path: self.path("teacher.eibt"),
            });
        }
        Ok(())
    }

    pub fn report(&self) -> Result<String, PipelineError> {
        let dir = self.out.join("metrics");
        let mut rows: Vec<ArtifactMetrics> = Vec::new();
        let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        names.sort();
        for p in names {
            rows.push(serde_json::from_slice(&std::fs::read(&p)?)?);
        }
        if rows.is_empty() {
            return Err(PipelineError::Dependency {
                stage: "eval".into(),
                path: dir,
            });
        }
        let mut csv = String::from("artifact,params,bytes,ops,acc,acc_int,ratio_vs_teacher\n");
        for r in &rows {
            writeln!(
                csv,
                "{},{},{},{},{:.4},{},{:.2}",
                r.name,
                r.params,
                r.bytes,
                r.ops,
                r.acc,
                r.acc_int.map(|a| format!("{a:.4}")).unwrap_or_default(),
                r.ratio_vs_teacher
            )
            .expect("string write");
        }
        atomic_write(&self.path("report.csv"), csv.as_bytes())?;
        let mut txt = String::new();
        writeln!(
            txt,
            "{:<28} {:>10} {:>12} {:>14} {:>7} {:>8} {:>8}",
            "artifact", "params", "bytes", "ops", "acc", "acc_int", "ratio"
        )
        .expect("string write");
        for r in &rows {
            writeln!(
                txt,
                "{:<28} {:>10} {:>12} {:>14} {:>7.4} {:>8} {:>8.2}",
                r.name,
                r.params,
                r.bytes,
                r.ops,
                r.acc,
                r.acc_int.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
                r.ratio_vs_teacher
            )
            .expect("string write");
        }
        writeln!(txt).expect("string write");
        writeln!(
            txt,
            "reference accounting: 407.0 MB / 1.91 MB = {:.2}x; assuming a vocab-21128, \
             embed-128, hidden-384, 2-layer factorized encoder, embeddings are ~44.7% of storage",
            crate::model::compression_ratio(407.0, 1.91)
        )
        .expect("string write");
        atomic_write(&self.path("report.txt"), txt.as_bytes())?;
        Ok(txt)
    }

    /// Full compression ladder: data, teacher, pretraining, the three
    /// distillation variants, then token pruning and quantization on the
    /// cross-distilled student, ending with the combined report.
    pub fn run_all(&self) -> Result<String, PipelineError> {
        let _lock = self.lock()?;
        self.gen_data()?;
        self.finetune_teacher()?;
        self.pretrain()?;
        match self.config.stage_order {
            StageOrder::DistillPruneQuantize => {
                for mode in [DistillMode::Kd, DistillMode::PiKd, DistillMode::CrossKd] {
                    self.distill(Some(mode))?;
                }
                self.prune(Some(DistillMode::CrossKd))?;
                self.quantize(Some(DistillMode::CrossKd))?;
            }
            StageOrder::PruneDistillQuantize => {
                self.prune(None)?;
                for mode in [DistillMode::Kd, DistillMode::PiKd, DistillMode::CrossKd] {
                    self.distill(Some(mode))?;
                }
                self.quantize(Some(DistillMode::CrossKd))?;
            }
        }
        self.report()
    }
}

/// Accuracy of the quantized model in the requested arithmetic mode.
pub fn quantized_accuracy(
    qm: &QuantizedModel,
    examples: &[Example],
    mode: QuantRunMode,
) -> Result<f64, PipelineError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(32) {
        let exs: Vec<&Example> = chunk.iter().collect();
        let batch = crate::data::make_batch(&exs, qm.model.spec.max_seq_len);
        let logits = quantized_forward(qm, &batch.ids, &batch.mask, batch.batch, batch.seq, mode)?;
        for (r, &label) in batch.labels.iter().enumerate() {
            let row = logits.row(r);
            let pred = row
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0;
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub task: SyntheticTask,
    pub teacher: ModelSpec,
    pub student: ModelSpec,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub finetune: FinetuneConfig,
    /// Mode field is ignored; all three run.
    pub plan: DistillPlan,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRun {
    pub mode: DistillMode,
    pub seed: u64,
    /// Final-epoch student task loss.
    pub task_loss: f64,
    pub eval_acc: f64,
}

/// Trains one teacher per seed and distills three students from it, one per
/// mode, on identical data. Seeds run in parallel.
pub fn run_ablation(cfg: &AblationConfig) -> Result<Vec<AblationRun>, PipelineError> {
    init_threads();
    let per_seed: Result<Vec<Vec<AblationRun>>, PipelineError> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut task = cfg.task.clone();
            task.seed = seed;
            let train = task.generate(cfg.train_examples, 0)?;
            let eval = task.generate(cfg.eval_examples, 1)?;
            let mut tspec = cfg.teacher.clone();
            tspec.seed = seed ^ 0x74;
            let mut teacher = build_model(&tspec)?;
            finetune_teacher(
                &mut teacher,
                &train,
                &eval,
                cfg.finetune.epochs,
                cfg.finetune.lr,
                cfg.finetune.batch_size,
                seed ^ 0x6674,
                cfg.finetune.max_steps,
            )?;
            let mut out = Vec::new();
            for mode in [DistillMode::Kd, DistillMode::PiKd, DistillMode::CrossKd] {
                let mut t = teacher.clone();
                let mut sspec = cfg.student.clone();
                sspec.seed = seed ^ 0x73;
                let mut student = build_model(&sspec)?;
                let mut plan = cfg.plan.clone();
                plan.mode = mode;
                plan.seed = seed ^ 0x70;
                let hist = run_distillation(&mut t, &mut student, &train, &eval, &plan)?;
                let last = hist.epochs.last().expect("at least one epoch");
                out.push(AblationRun {
                    mode,
                    seed,
                    task_loss: last.student_task_loss,
                    eval_acc: last.eval_acc,
                });
            }
            Ok(out)
        })
        .collect();
    Ok(per_seed?.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, integrate_head};

    fn tiny_spec(seed: u64, hidden: usize, layers: usize) -> ModelSpec {
        ModelSpec {
            vocab_size: 60,
            max_seq_len: 8,
            embed_dim: hidden,
            hidden_dim: hidden,
            intermediate_dim: 2 * hidden,
            num_layers: layers,
            num_heads: 2,
            share_layers: false,
            factorized_embedding: false,
            num_classes: 3,
            seed,
        }
    }

    fn tiny_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::desk_default();
        cfg.task = SyntheticTask {
            vocab_size: 60,
            num_classes: 3,
            class_tokens_per_class: 8,
            seq_len_min: 4,
            seq_len_max: 6,
            seed: 11,
        };
        cfg.train_examples = 48;
        cfg.eval_examples = 24;
        cfg.calib_examples = 16;
        cfg.eval_seq_len = 8;
        cfg.teacher = tiny_spec(1, 32, 2);
        cfg.student = tiny_spec(2, 16, 1);
        cfg.pretrain = MlmConfig {
            epochs: 1,
            batch_size: 8,
            lr: 1e-3,
            mask_prob: 0.15,
            seed: 3,
            max_steps: Some(4),
        };
        cfg.finetune = FinetuneConfig { epochs: 1, lr: 1e-3, batch_size: 8, max_steps: Some(6) };
        cfg.distill.epochs = 1;
        cfg.distill.batch_size = 8;
        cfg.distill.lambda_teacher = 1e-5;
        cfg.distill.lambda_student = 1e-3;
        cfg.distill.max_steps_per_epoch = Some(4);
        cfg.prune = PruneConfig {
            keep: 40,
            convention: AttnConvention::Received,
            recovery_steps: 2,
            recovery_lr: 1e-3,
        };
        cfg.quant = QuantConfig { group_size: 1, iterations: 2, lr: 1e-3, batch_size: 8, independent: false };
        cfg
    }

    #[test]
    fn model_checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(&tiny_spec(9, 16, 2)).unwrap();
        let p = dir.path().join("m.eibt");
        save_model(&p, &model).unwrap();
        let bytes1 = std::fs::read(&p).unwrap();
        let loaded = load_model(&p).unwrap();
        // stored values are the f32 forms of the originals
        for ((_, a, _), (_, b, _)) in model.param_entries().iter().zip(loaded.param_entries()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
                assert_eq!(*y, *y as f32 as f64);
            }
        }
        save_model(&p, &loaded).unwrap();
        assert_eq!(bytes1, std::fs::read(&p).unwrap());
    }

    #[test]
    fn checkpoint_with_projector_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let teacher = build_model(&tiny_spec(1, 32, 1)).unwrap();
        let mut student = build_model(&tiny_spec(2, 16, 1)).unwrap();
        integrate_head(&teacher, &mut student).unwrap();
        assert!(student.projector.is_some());
        let p = dir.path().join("s.eibt");
        save_model(&p, &student).unwrap();
        let loaded = load_model(&p).unwrap();
        assert_eq!(loaded.head_width(), 32);
        assert!(loaded.projector.is_some());
        assert_eq!(loaded.parameter_count(), student.parameter_count());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected_with_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(&tiny_spec(4, 16, 1)).unwrap();
        let p = dir.path().join("m.eibt");
        save_model(&p, &model).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        // bad magic
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_model(&p), Err(PipelineError::Format { offset: 0, .. })));
        // truncation
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        match load_model(&p) {
            Err(PipelineError::Format { msg, .. }) => assert!(msg.contains("bytes")),
            other => panic!("expected format error, got {other:?}"),
        }
        // version bump
        let mut bad = bytes.clone();
        bad[4] = 9;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_model(&p), Err(PipelineError::Format { offset: 4, .. })));
    }

    #[test]
    fn quantized_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(&tiny_spec(5, 16, 1)).unwrap();
        let calib = SyntheticTask {
            vocab_size: 60,
            num_classes: 3,
            class_tokens_per_class: 8,
            seq_len_min: 4,
            seq_len_max: 6,
            seed: 2,
        }
        .generate(16, 2)
        .unwrap();
        let cfg = QuantConfig { group_size: 1, iterations: 2, lr: 1e-3, batch_size: 8, independent: false };
        let (qm, _) = quantize_model(&model, &calib, &cfg).unwrap();
        let p = dir.path().join("q.eibt");
        save_quantized(&p, &qm).unwrap();
        let bytes1 = std::fs::read(&p).unwrap();
        let loaded = load_quantized(&p).unwrap();
        assert_eq!(loaded.codes.len(), qm.codes.len());
        for (name, codes) in &qm.codes {
            assert_eq!(loaded.code(name).unwrap().data(), codes.data());
        }
        assert_eq!(loaded.act_scales, qm.act_scales);
        save_quantized(&p, &loaded).unwrap();
        assert_eq!(bytes1, std::fs::read(&p).unwrap());
    }

    #[test]
    fn missing_dependency_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let pipe = Pipeline::new(tiny_config(), dir.path()).unwrap();
        match pipe.distill(None) {
            Err(PipelineError::Dependency { stage, .. }) => {
                assert_eq!(stage, "finetune-teacher");
            }
            other => panic!("expected dependency error, got {other:?}"),
        }
        assert_eq!(
            PipelineError::Dependency { stage: "x".into(), path: "/p".into() }.exit_code(),
            3
        );
    }

    #[test]
    fn config_rejects_unknown_fields_and_bad_versions() {
        let mut v = serde_json::to_value(tiny_config()).unwrap();
        v["version"] = serde_json::json!(2);
        let text = serde_json::to_string(&v).unwrap();
        assert!(matches!(PipelineConfig::from_json(&text), Err(PipelineError::Config(_))));
        let mut v = serde_json::to_value(tiny_config()).unwrap();
        v["surprise"] = serde_json::json!(1);
        let text = serde_json::to_string(&v).unwrap();
        assert!(PipelineConfig::from_json(&text).is_err());
        // round trip of a valid config
        let text = serde_json::to_string(&tiny_config()).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), tiny_config());
    }

    #[test]
    fn run_all_produces_the_ladder_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let pipe = Pipeline::new(tiny_config(), dir.path().join("a")).unwrap();
        let report = pipe.run_all().unwrap();
        assert!(report.contains("teacher"));
        assert!(report.contains("student_cross-kd_quant"));
        for f in [
            "vocab.txt",
            "train.tsv",
            "teacher.eibt",
            "student_pretrained.eibt",
            "student_kd.eibt",
            "student_pi-kd.eibt",
            "student_cross-kd.eibt",
            "student_cross-kd_pruned.eibt",
            "student_cross-kd_quant.eibt",
            "vocab_pruned.txt",
            "importance.tsv",
            "report.csv",
        ] {
            assert!(dir.path().join("a").join(f).exists(), "missing {f}");
        }
        // a second full run in a fresh directory is byte-identical
        let pipe2 = Pipeline::new(tiny_config(), dir.path().join("b")).unwrap();
        pipe2.run_all().unwrap();
        for f in ["teacher.eibt", "student_cross-kd.eibt", "student_cross-kd_quant.eibt"] {
            assert_eq!(
                std::fs::read(dir.path().join("a").join(f)).unwrap(),
                std::fs::read(dir.path().join("b").join(f)).unwrap(),
                "{f} differs between runs"
            );
        }
        // re-running one stage in place rewrites the same bytes
        let before = std::fs::read(dir.path().join("a").join("student_cross-kd.eibt")).unwrap();
        pipe.distill(Some(DistillMode::CrossKd)).unwrap();
        assert_eq!(
            before,
            std::fs::read(dir.path().join("a").join("student_cross-kd.eibt")).unwrap()
        );
    }

    #[test]
    fn lock_file_blocks_concurrent_runs() {
        let dir = tempfile::tempdir().unwrap();
        let pipe = Pipeline::new(tiny_config(), dir.path()).unwrap();
        std::fs::write(dir.path().join(".lock"), "123").unwrap();
        assert!(matches!(pipe.run_all(), Err(PipelineError::Config(_))));
        std::fs::remove_file(dir.path().join(".lock")).unwrap();
    }
}
