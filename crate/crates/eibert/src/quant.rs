//! Module-wise int8 post-training quantization and the quantized inference
//! paths.
//!
//! Weight matrices quantize to the symmetric code set {-127..127} with one
//! learned step size per matrix; biases and layer-norm vectors stay fp32.
//! The model splits into an embedding module, groups of transformer blocks,
//! and the head; modules calibrate in forward order, each seeing the
//! already-quantized predecessors as its input distribution while matching
//! full-precision targets, so later modules compensate earlier rounding.
//! Step sizes are refined by gradient descent with a straight-through
//! estimator; every iteration is accepted only if the full-set
//! reconstruction error does not increase, which makes the error trace
//! monotone and the final error never worse than plain round-to-nearest.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_batch, Batch, Example};
use crate::distill::{Adam, AdamHyper};
use crate::model::forward::{bind_model, forward, forward_on_tape, Capture};
use crate::model::{storage_bytes, ModelError, StorageBreakdown, StoragePrecision, TransformerModel};
use crate::numerics::tape::GradTape;
use crate::numerics::{ops, IntTensor, NumericsError, Tensor};

pub const QMAX: f64 = 127.0;
pub const STEP_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("quantization config error: {0}")]
    Config(String),
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
    #[error("missing activation scale for site {0}; collect scales first")]
    MissingScale(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    /// Transformer blocks per quantization module.
    pub group_size: usize,
    /// Calibration iterations per module.
    pub iterations: usize,
    /// Step-size / weight refinement learning rate.
    pub lr: f64,
    pub batch_size: usize,
    /// Calibrate every module against full-precision inputs instead of the
    /// progressively quantized model.
    #[serde(default)]
    pub independent: bool,
}

impl QuantConfig {
    pub fn validate(&self) -> Result<(), QuantError> {
        if self.group_size == 0 || self.batch_size == 0 {
            return Err(QuantError::Config("group_size and batch_size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(QuantError::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig { group_size: 1, iterations: 200, lr: 1e-4, batch_size: 32, independent: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModuleKind {
    Embedding,
    /// Block indices [start, end) of the parameter blocks (one entry for a
    /// cross-layer-shared model).
    Blocks { start: usize, end: usize },
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleDef {
    pub name: String,
    pub kind: ModuleKind,
    /// Canonical names of the weight matrices this module quantizes.
    pub weights: Vec<String>,
}

const BLOCK_MATRICES: [&str; 6] = ["wq", "wk", "wv", "wo", "w_ff1", "w_ff2"];

/// Splits the model into embedding + ceil(blocks / group_size) + head
/// modules, in forward order.
pub fn partition_modules(model: &TransformerModel, group_size: usize) -> Vec<ModuleDef> {
    assert!(group_size > 0);
    let mut out = Vec::new();
    let mut emb = vec!["token_embedding".to_string()];
    if model.embed_projection.is_some() {
        emb.push("embed_projection".to_string());
    }
    out.push(ModuleDef { name: "embedding".into(), kind: ModuleKind::Embedding, weights: emb });
    let n_blocks = model.blocks.len();
    let mut start = 0;
    while start < n_blocks {
        let end = (start + group_size).min(n_blocks);
        let weights = (start..end)
            .flat_map(|i| BLOCK_MATRICES.iter().map(move |m| format!("block{i}.{m}")))
            .collect();
        out.push(ModuleDef {
            name: format!("blocks{start}-{}", end - 1),
            kind: ModuleKind::Blocks { start, end },
            weights,
        });
        start = end;
    }
    let mut head = vec!["pooler_w".to_string(), "classifier_w".to_string()];
    if model.projector.is_some() {
        head.push("projector_w".to_string());
    }
    out.push(ModuleDef { name: "head".into(), kind: ModuleKind::Head, weights: head });
    out
}

/// Round-half-away-from-zero projection onto step * {-127..127}.
pub fn quantize_project(w: &Tensor, step: f64) -> Result<IntTensor, QuantError> {
    if !(step > 0.0) {
        return Err(QuantError::BadStep(step));
    }
    let codes: Vec<i8> = w
        .data()
        .iter()
        .map(|&v| (v / step).round().clamp(-QMAX, QMAX) as i8)
        .collect();
    Ok(IntTensor::new(w.shape().to_vec(), codes)?)
}

/// Initial step size: max |w| / 127, floored to keep it positive.
pub fn init_step(w: &Tensor) -> f64 {
    (w.max_abs() / QMAX).max(STEP_FLOOR)
}

/// Simulated quantization of a weight tensor (what the int8 form dequantizes
/// back to).
pub fn fake_quant_values(w: &Tensor, step: f64) -> Tensor {
    w.map(|v| step * (v / step).round().clamp(-QMAX, QMAX))
}

fn param_by_name<'a>(model: &'a TransformerModel, name: &str) -> Tensor {
    model
        .param_entries()
        .into_iter()
        .find(|(n, _, _)| n == name)
        .map(|(_, t, _)| t.clone())
        .unwrap_or_else(|| panic!("unknown parameter {name}"))
}

fn set_param(model: &mut TransformerModel, name: &str, value: Tensor) {
    let mut entries = model.param_entries_mut();
    let entry = entries
        .iter_mut()
        .find(|(n, _, _)| n == name)
        .unwrap_or_else(|| panic!("unknown parameter {name}"));
    *entry.1 = value;
}

/// Reference activations for one calibration batch.
struct Reference {
    layer_hidden: Vec<Tensor>,
    logits: Tensor,
}

fn reference_captures(
    model: &TransformerModel,
    batches: &[Batch],
) -> Result<Vec<Reference>, QuantError> {
    batches
        .iter()
        .map(|b| {
            let t = forward(
                model,
                &b.ids,
                &b.mask,
                b.batch,
                b.seq,
                Capture { layer_hidden: true, ..Default::default() },
            )?;
            Ok(Reference { layer_hidden: t.layer_hidden.unwrap(), logits: t.logits })
        })
        .collect()
}

/// Index of the module's output among the captured layer boundaries, or
/// None for the head (which compares logits).
fn output_site(model: &TransformerModel, kind: &ModuleKind) -> Option<usize> {
    match *kind {
        ModuleKind::Embedding => Some(0),
        ModuleKind::Blocks { end, .. } => {
            if model.spec.share_layers {
                Some(model.spec.num_layers)
            } else {
                Some(end)
            }
        }
        ModuleKind::Head => None,
    }
}

/// Mean squared reconstruction error of one module over the calibration set,
/// with its weights fake-quantized at the given steps.
fn module_error(
    input_model: &TransformerModel,
    module: &ModuleDef,
    steps: &[f64],
    batches: &[Batch],
    refs: &[Reference],
) -> Result<f64, QuantError> {
    let mut temp = input_model.clone();
    for (name, &s) in module.weights.iter().zip(steps) {
        let w = param_by_name(input_model, name);
        set_param(&mut temp, name, fake_quant_values(&w, s));
    }
    let site = output_site(input_model, &module.kind);
    let mut total = 0.0;
    for (batch, reference) in batches.iter().zip(refs) {
        let t = forward(
            &temp,
            &batch.ids,
            &batch.mask,
            batch.batch,
            batch.seq,
            Capture { layer_hidden: site.is_some(), ..Default::default() },
        )?;
        let (a, b) = match site {
            Some(i) => (t.layer_hidden.as_ref().unwrap()[i].clone(), refs_site(reference, Some(i))),
            None => (t.logits.clone(), refs_site(reference, None)),
        };
        total += ops::mse(&a, &b)?;
    }
    Ok(total / batches.len() as f64)
}

fn refs_site(r: &Reference, site: Option<usize>) -> Tensor {
    match site {
        Some(i) => r.layer_hidden[i].clone(),
        None => r.logits.clone(),
    }
}

struct ScalarAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    hyper: AdamHyper,
}

impl ScalarAdam {
    fn new(n: usize) -> Self {
        ScalarAdam { m: vec![0.0; n], v: vec![0.0; n], t: 0, hyper: AdamHyper::default() }
    }

    fn step(&mut self, values: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..values.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grads[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grads[i] * grads[i];
            values[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleReport {
    pub name: String,
    /// Round-to-nearest error before any refinement.
    pub initial_err: f64,
    pub final_err: f64,
    pub iterations: usize,
    /// Accepted error after each iteration; nonincreasing by construction.
    pub trace: Vec<f64>,
}

pub fn report_csv(reports: &[ModuleReport]) -> String {
    let mut out = String::from("module,initial_err,final_err,iterations\n");
    for r in reports {
        writeln!(out, "{},{:.8e},{:.8e},{}", r.name, r.initial_err, r.final_err, r.iterations)
            .expect("string write");
    }
    out
}

/// Calibrates one module in place on `work`: refines its weights and step
/// sizes, then freezes the weights at their dequantized values. Returns the
/// final step per weight and the error report.
fn calibrate_module(
    work: &mut TransformerModel,
    module: &ModuleDef,
    batches: &[Batch],
    refs: &[Reference],
    config: &QuantConfig,
) -> Result<(Vec<f64>, ModuleReport), QuantError> {
    let mut steps: Vec<f64> = module
        .weights
        .iter()
        .map(|name| init_step(&param_by_name(work, name)))
        .collect();
    let initial_err = module_error(work, module, &steps, batches, refs)?;
    let mut best_err = initial_err;
    let mut best_weights: Vec<Tensor> =
        module.weights.iter().map(|n| param_by_name(work, n)).collect();
    let mut best_steps = steps.clone();
    let mut trace = vec![initial_err];

    let mut weight_adam = Adam::new(work, AdamHyper::default());
    let mut step_adam = ScalarAdam::new(steps.len());
    let site = output_site(work, &module.kind);

    for iter in 0..config.iterations {
        let bi = iter % batches.len();
        let batch = &batches[bi];
        let reference = &refs[bi];

        let mut tape = GradTape::new();
        let weights = &module.weights;
        let mut binding = bind_model(&mut tape, work, &move |n: &str| {
            weights.iter().any(|w| w == n)
        });
        let mut step_slots = Vec::with_capacity(steps.len());
        for (name, &s) in module.weights.iter().zip(&steps) {
            let w = binding.node(name);
            let (s_node, s_slot) = tape.param(Tensor::scalar(s));
            let fq = tape.fake_quant(w, s_node);
            binding.set(name, fq);
            step_slots.push(s_slot);
        }
        let trace_fwd = forward_on_tape(
            &mut tape,
            &binding,
            work,
            &batch.ids,
            &batch.mask,
            batch.batch,
            batch.seq,
            Capture { layer_hidden: site.is_some(), ..Default::default() },
        );
        let out = match site {
            Some(i) => trace_fwd.layer_hidden[i],
            None => trace_fwd.logits,
        };
        let target = tape.constant(refs_site(reference, site));
        let loss = tape.mse_pair(out, target);
        let grads = tape.backward(loss)?;

        let step_grads: Vec<f64> =
            step_slots.iter().map(|&s| grads.by_slot(s).scalar_value()).collect();
        weight_adam.step(work, &binding.slots, &grads, config.lr);
        step_adam.step(&mut steps, &step_grads, config.lr);
        for s in steps.iter_mut() {
            *s = s.max(STEP_FLOOR);
        }

        let err = module_error(work, module, &steps, batches, refs)?;
        if err <= best_err {
            best_err = err;
            best_weights = module.weights.iter().map(|n| param_by_name(work, n)).collect();
            best_steps = steps.clone();
        } else {
            for (name, w) in module.weights.iter().zip(&best_weights) {
                set_param(work, name, w.clone());
            }
            steps = best_steps.clone();
        }
        trace.push(best_err);
    }

    // freeze the module at its dequantized values
    for (name, (w, &s)) in module.weights.iter().zip(best_weights.iter().zip(&best_steps)) {
        set_param(work, name, fake_quant_values(w, s));
    }
    let report = ModuleReport {
        name: module.name.clone(),
        initial_err,
        final_err: best_err,
        iterations: config.iterations,
        trace,
    };
    Ok((best_steps, report))
}

/// Int8 weights with per-matrix steps, per-site activation scales, and the
/// dequantized float model they reproduce exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    /// Float model whose matrices equal step * code elementwise.
    pub model: TransformerModel,
    pub codes: Vec<(String, IntTensor)>,
    pub steps: Vec<(String, f64)>,
    /// Per-linear-site input scales (site named after its weight matrix).
    pub act_scales: Vec<(String, f64)>,
}

impl QuantizedModel {
    pub fn to_float_sim(&self) -> &TransformerModel {
        &self.model
    }

    pub fn code(&self, name: &str) -> Option<&IntTensor> {
        self.codes.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn step(&self, name: &str) -> Option<f64> {
        self.steps.iter().find(|(n, _)| n == name).map(|&(_, s)| s)
    }

    pub fn act_scale(&self, name: &str) -> Option<f64> {
        self.act_scales.iter().find(|(n, _)| n == name).map(|&(_, s)| s)
    }

    pub fn storage(&self) -> StorageBreakdown {
        storage_bytes(&self.model, StoragePrecision::Int8WithFp32Steps)
    }
}

/// Quantizes every module in forward order. Returns the quantized model
/// (with activation scales collected on the calibration set) and one report
/// per module.
pub fn quantize_model(
    model: &TransformerModel,
    calib: &[Example],
    config: &QuantConfig,
) -> Result<(QuantizedModel, Vec<ModuleReport>), QuantError> {
    config.validate()?;
    if calib.is_empty() {
        return Err(QuantError::Config("empty calibration set".into()));
    }
    let batches: Vec<Batch> = calib
        .chunks(config.batch_size)
        .map(|chunk| {
            let exs: Vec<&Example> = chunk.iter().collect();
            make_batch(&exs, model.spec.max_seq_len)
        })
        .collect();
    let refs = reference_captures(model, &batches)?;
    let modules = partition_modules(model, config.group_size);

    let mut work = model.clone();
    let mut codes = Vec::new();
    let mut steps_out = Vec::new();
    let mut reports = Vec::new();
    for module in &modules {
        let (steps, report) = if config.independent {
            // inputs come from the full-precision model; copy the quantized
            // module into the accumulating model afterwards
            let mut independent_work = model.clone();
            let out = calibrate_module(&mut independent_work, module, &batches, &refs, config)?;
            for name in &module.weights {
                set_param(&mut work, name, param_by_name(&independent_work, name));
            }
            out
        } else {
            calibrate_module(&mut work, module, &batches, &refs, config)?
        };
        for (name, &s) in module.weights.iter().zip(&steps) {
            // work already holds dequantized values: codes are exact
            let w = param_by_name(&work, name);
            codes.push((name.clone(), quantize_project(&w, s)?));
            steps_out.push((name.clone(), s));
        }
        reports.push(report);
    }
    let mut qm = QuantizedModel { model: work, codes, steps: steps_out, act_scales: Vec::new() };
    collect_act_scales(&mut qm, &batches);
    Ok((qm, reports))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantRunMode {
    /// i8 x i8 multiplies with 64-bit integer accumulation, rescaled to fp
    /// between layers; softmax / layer norm / GELU stay floating point.
    Integer,
    /// Float arithmetic over the dequantized weights.
    FloatSim,
}

/// Integer linear layer: quantizes the input row-wise to i8 at `act_scale`,
/// accumulates i8 x i8 products in i64, and rescales by act_scale * step.
fn int_linear(
    x: &Tensor,
    codes: &IntTensor,
    step: f64,
    act_scale: f64,
    bias: Option<&Tensor>,
) -> Tensor {
    let (m, k) = (x.rows(), x.cols());
    let n = codes.cols();
    assert_eq!(k, codes.rows(), "int_linear inner dimension mismatch");
    // worst case |sum| <= k * 127 * 127; verify it fits the accumulator
    assert!((k as i64) < i64::MAX / (127 * 127), "accumulator overflow bound exceeded");
    let xq: Vec<i64> = x
        .data()
        .iter()
        .map(|&v| (v / act_scale).round().clamp(-QMAX, QMAX) as i64)
        .collect();
    let rescale = act_scale * step;
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for p in 0..k {
            let a = xq[i * k + p];
            if a == 0 {
                continue;
            }
            let brow = codes.row(p);
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &b) in orow.iter_mut().zip(brow) {
                *o += (a * b as i64) as f64 * rescale;
            }
        }
    }
    let mut t = Tensor::matrix(m, n, out).unwrap();
    if let Some(b) = bias {
        let data = t.data_mut();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += b.data()[c];
            }
        }
    }
    t
}

fn layer_norm_fp(x: &mut Tensor, gamma: &Tensor, beta: &Tensor) {
    let cols = x.cols();
    let rows = x.rows();
    let data = x.data_mut();
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + 1e-12).sqrt();
        for (c, v) in row.iter_mut().enumerate() {
            *v = gamma.data()[c] * ((*v - mean) * inv) + beta.data()[c];
        }
    }
}

enum SiteMode<'a> {
    Float,
    Collect(&'a mut Vec<(String, f64)>),
    Integer,
}

fn linear_site(
    qm: &QuantizedModel,
    name: &str,
    x: &Tensor,
    bias: Option<&Tensor>,
    mode: &mut SiteMode,
) -> Result<Tensor, QuantError> {
    match mode {
        SiteMode::Integer => {
            let codes = qm
                .code(name)
                .ok_or_else(|| QuantError::Config(format!("no codes for {name}")))?;
            let step = qm.step(name).unwrap();
            let scale = qm
                .act_scale(name)
                .ok_or_else(|| QuantError::MissingScale(name.to_string()))?;
            Ok(int_linear(x, codes, step, scale, bias))
        }
        SiteMode::Float | SiteMode::Collect(_) => {
            let xq;
            let x = match mode {
                SiteMode::Collect(scales) => {
                    let observed = x.max_abs();
                    match scales.iter_mut().find(|(n, _)| n == name) {
                        Some((_, s)) => *s = s.max(observed),
                        None => scales.push((name.to_string(), observed)),
                    }
                    x
                }
                _ => {
                    // simulate the integer path's activation quantization so
                    // the two modes differ only in accumulation order
                    let scale = qm
                        .act_scale(name)
                        .ok_or_else(|| QuantError::MissingScale(name.to_string()))?;
                    xq = x.map(|v| (v / scale).round().clamp(-QMAX, QMAX) * scale);
                    &xq
                }
            };
            let w = param_by_name(&qm.model, name);
            let mut out = x.matmul(&w);
            if let Some(b) = bias {
                let cols = out.cols();
                let data = out.data_mut();
                for r in 0..data.len() / cols {
                    for c in 0..cols {
                        data[r * cols + c] += b.data()[c];
                    }
                }
            }
            Ok(out)
        }
    }
}

fn run_quantized(
    qm: &QuantizedModel,
    ids: &[usize],
    mask: &[u8],
    batch: usize,
    seq: usize,
    mode: &mut SiteMode,
) -> Result<Tensor, QuantError> {
    let model = &qm.model;
    let spec = &model.spec;
    let h = spec.hidden_dim;
    // embedding lookup uses the dequantized table directly (a gather is not
    // a multiply; its int8 form rescales to exactly these values)
    let mut data = Vec::with_capacity(ids.len() * spec.embed_dim);
    for &i in ids {
        if i >= spec.vocab_size {
            return Err(QuantError::Model(ModelError::Vocab { id: i, size: spec.vocab_size }));
        }
        data.extend_from_slice(model.token_embedding.row(i));
    }
    let mut x = Tensor::matrix(ids.len(), spec.embed_dim, data).unwrap();
    if model.embed_projection.is_some() {
        x = linear_site(qm, "embed_projection", &x, None, mode)?;
    }
    {
        let cols = x.cols();
        let data = x.data_mut();
        for (i, v) in data.iter_mut().enumerate() {
            let pos = (i / cols) % seq;
            *v += model.position_embedding.at(pos, i % cols);
        }
    }
    layer_norm_fp(&mut x, &model.embed_ln_gamma, &model.embed_ln_beta);

    let dk = spec.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    for layer in 0..spec.num_layers {
        let bi = model.block_index(layer);
        let b = &model.blocks[bi];
        let p = |n: &str| format!("block{bi}.{n}");
        let q_all = linear_site(qm, &p("wq"), &x, Some(&b.bq), mode)?;
        let k_all = linear_site(qm, &p("wk"), &x, Some(&b.bk), mode)?;
        let v_all = linear_site(qm, &p("wv"), &x, Some(&b.bv), mode)?;
        let mut ctx = Tensor::zeros(vec![batch * seq, h]);
        for s_i in 0..batch {
            for head in 0..spec.num_heads {
                // per-head attention in floating point
                for r in 0..seq {
                    let qrow = &q_all.row(s_i * seq + r)[head * dk..(head + 1) * dk];
                    let mut scores = vec![0.0f64; seq];
                    for c in 0..seq {
                        if mask[s_i * seq + c] == 0 {
                            scores[c] = -1e9;
                            continue;
                        }
                        let krow = &k_all.row(s_i * seq + c)[head * dk..(head + 1) * dk];
                        scores[c] = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<f64>() * scale;
                    }
                    ops::softmax_row_in_place(&mut scores);
                    let orow = &mut ctx.data_mut()[(s_i * seq + r) * h..(s_i * seq + r + 1) * h];
                    for c in 0..seq {
                        let w = scores[c];
                        if w == 0.0 {
                            continue;
                        }
                        let vrow = &v_all.row(s_i * seq + c)[head * dk..(head + 1) * dk];
                        for (d, &vv) in orow[head * dk..(head + 1) * dk].iter_mut().zip(vrow) {
                            *d += w * vv;
                        }
                    }
                }
            }
        }
        let attn_out = linear_site(qm, &p("wo"), &ctx, Some(&b.bo), mode)?;
        x.add_assign(&attn_out);
        layer_norm_fp(&mut x, &b.ln1_gamma, &b.ln1_beta);
        let ff1 = linear_site(qm, &p("w_ff1"), &x, Some(&b.b_ff1), mode)?;
        let gelu = ff1.map(ops::gelu);
        let ff2 = linear_site(qm, &p("w_ff2"), &gelu, Some(&b.b_ff2), mode)?;
        x.add_assign(&ff2);
        layer_norm_fp(&mut x, &b.ln2_gamma, &b.ln2_beta);
    }

    let mut cls = Vec::with_capacity(batch * h);
    for i in 0..batch {
        cls.extend_from_slice(x.row(i * seq));
    }
    let mut cls = Tensor::matrix(batch, h, cls).unwrap();
    if model.head_width() != h {
        let pb = model.projector.as_ref().map(|pr| pr.bias.clone());
        cls = linear_site(qm, "projector_w", &cls, pb.as_ref(), mode)?;
    }
    let pooled = linear_site(qm, "pooler_w", &cls, Some(&model.pooler_b), mode)?.map(f64::tanh);
    linear_site(qm, "classifier_w", &pooled, Some(&model.classifier_b), mode)
}

/// Records per-site activation scales (max |input| / 127) over the batches.
pub fn collect_act_scales(qm: &mut QuantizedModel, batches: &[Batch]) {
    let mut maxes: Vec<(String, f64)> = Vec::new();
    for b in batches {
        let mut mode = SiteMode::Collect(&mut maxes);
        run_quantized(qm, &b.ids, &b.mask, b.batch, b.seq, &mut mode)
            .expect("scale collection forward failed");
    }
    qm.act_scales = maxes
        .into_iter()
        .map(|(n, m)| (n, (m / QMAX).max(STEP_FLOOR)))
        .collect();
}

/// Quantized forward pass; returns the [B x classes] logits.
pub fn quantized_forward(
    qm: &QuantizedModel,
    ids: &[usize],
    mask: &[u8],
    batch: usize,
    seq: usize,
    mode: QuantRunMode,
) -> Result<Tensor, QuantError> {
    let mut site_mode = match mode {
        QuantRunMode::Integer => SiteMode::Integer,
        QuantRunMode::FloatSim => SiteMode::Float,
    };
    run_quantized(qm, ids, mask, batch, seq, &mut site_mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticTask;
    use crate::model::{build_model, ModelSpec};

    fn spec(seed: u64) -> ModelSpec {
        ModelSpec {
            vocab_size: 60,
            max_seq_len: 8,
            embed_dim: 16,
            hidden_dim: 16,
            intermediate_dim: 32,
            num_layers: 2,
            num_heads: 2,
            share_layers: false,
            factorized_embedding: false,
            num_classes: 3,
            seed,
        }
    }

    fn calib() -> Vec<crate::data::Example> {
        SyntheticTask {
            vocab_size: 60,
            num_classes: 3,
            class_tokens_per_class: 8,
            seq_len_min: 4,
            seq_len_max: 6,
            seed: 2,
        }
        .generate(32, 9)
        .unwrap()
    }

    #[test]
    fn projection_rounds_half_away_and_clamps() {
        let w = Tensor::vector(vec![0.26, -0.26, 0.25, -0.25, 20.0, -20.0, 0.0]);
        let q = quantize_project(&w, 0.1).unwrap();
        assert_eq!(q.data(), &[3, -3, 3, -3, 127, -127, 0]);
        assert!(quantize_project(&w, 0.0).is_err());
        assert!(quantize_project(&w, -1.0).is_err());
    }

    #[test]
    fn codes_never_reach_negative_128() {
        let w = Tensor::vector((0..1000).map(|i| (i as f64 - 500.0) * 0.37).collect());
        let q = quantize_project(&w, 0.01).unwrap();
        assert!(q.data().iter().all(|&c| c >= -127)); // i8 caps the upper end at 127
    }

    #[test]
    fn initial_step_spans_the_weight_range() {
        let w = Tensor::vector(vec![0.5, -1.27, 0.3]);
        assert!((init_step(&w) - 0.01).abs() < 1e-15);
        assert_eq!(init_step(&Tensor::zeros(vec![4])), STEP_FLOOR);
    }

    #[test]
    fn dequantization_error_is_bounded_by_half_a_step() {
        let w = Tensor::vector(vec![0.031, -0.094, 0.0049, 0.12]);
        let s = init_step(&w);
        let q = quantize_project(&w, s).unwrap();
        for (orig, deq) in w.data().iter().zip(q.dequantize(s).data()) {
            assert!((orig - deq).abs() <= s / 2.0 + 1e-15);
        }
    }

    #[test]
    fn partition_counts_match_the_closed_form() {
        let mut s = spec(1);
        s.num_layers = 5;
        let m = build_model(&s).unwrap();
        for g in 1..=5 {
            let mods = partition_modules(&m, g);
            assert_eq!(mods.len(), 5usize.div_ceil(g) + 2);
            // every matrix appears in exactly one module
            let mut all: Vec<&String> = mods.iter().flat_map(|md| &md.weights).collect();
            all.sort();
            all.dedup();
            // token embedding + 6 per block + pooler + classifier
            assert_eq!(all.len(), 1 + 5 * 6 + 2);
        }
    }

    #[test]
    fn shared_blocks_quantize_once() {
        let mut s = spec(1);
        s.share_layers = true;
        s.num_layers = 4;
        let m = build_model(&s).unwrap();
        let mods = partition_modules(&m, 1);
        assert_eq!(mods.len(), 3); // embedding, one block group, head
        assert!(mods[1].weights.iter().all(|w| w.starts_with("block0.")));
    }

    #[test]
    fn calibration_trace_is_monotone_and_beats_round_to_nearest() {
        let m = build_model(&spec(3)).unwrap();
        let cfg = QuantConfig { group_size: 1, iterations: 12, lr: 1e-3, batch_size: 16, independent: false };
        let (_, reports) = quantize_model(&m, &calib(), &cfg).unwrap();
        assert_eq!(reports.len(), 4); // embedding, 2 block groups, head
        for r in &reports {
            assert!(r.final_err <= r.initial_err, "{r:?}");
            for w in r.trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-18, "trace not monotone: {:?}", r.trace);
            }
        }
    }

    #[test]
    fn float_sim_matches_the_full_precision_model_closely() {
        let m = build_model(&spec(4)).unwrap();
        let cfg = QuantConfig { group_size: 2, iterations: 8, lr: 1e-3, batch_size: 16, independent: false };
        let data = calib();
        let (qm, _) = quantize_model(&m, &data, &cfg).unwrap();
        // dequantized weights reproduce codes exactly
        for (name, codes) in &qm.codes {
            let w = param_by_name(&qm.model, name);
            let deq = codes.dequantize(qm.step(name).unwrap());
            assert_eq!(w, deq, "dequantized mismatch for {name}");
        }
        let exs: Vec<&crate::data::Example> = data.iter().take(8).collect();
        let b = make_batch(&exs, 8);
        let fp = forward(&m, &b.ids, &b.mask, b.batch, b.seq, Capture::default()).unwrap();
        let sim = quantized_forward(&qm, &b.ids, &b.mask, b.batch, b.seq, QuantRunMode::FloatSim)
            .unwrap();
        let max_diff = fp
            .logits
            .data()
            .iter()
            .zip(sim.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 0.05, "float-sim drifted {max_diff}");
    }

    #[test]
    fn integer_path_tracks_float_sim() {
        let m = build_model(&spec(5)).unwrap();
        let cfg = QuantConfig { group_size: 1, iterations: 4, lr: 1e-3, batch_size: 16, independent: false };
        let data = calib();
        let (qm, _) = quantize_model(&m, &data, &cfg).unwrap();
        let exs: Vec<&crate::data::Example> = data.iter().take(8).collect();
        let b = make_batch(&exs, 8);
        let sim = quantized_forward(&qm, &b.ids, &b.mask, b.batch, b.seq, QuantRunMode::FloatSim)
            .unwrap();
        let int = quantized_forward(&qm, &b.ids, &b.mask, b.batch, b.seq, QuantRunMode::Integer)
            .unwrap();
        assert!(int.all_finite());
        let max_diff = sim
            .data()
            .iter()
            .zip(int.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 0.2, "integer path drifted {max_diff}");
    }

    #[test]
    fn integer_linear_is_exact_on_representable_inputs() {
        // activations already integers (scale 1), weights exact code multiples
        let codes = IntTensor::new(vec![2, 2], vec![3, -2, 5, 7]).unwrap();
        let step = 0.5;
        let x = Tensor::matrix(2, 2, vec![2.0, -1.0, 4.0, 3.0]).unwrap();
        let got = int_linear(&x, &codes, step, 1.0, None);
        let expect = x.matmul(&codes.dequantize(step));
        assert_eq!(got.data(), expect.data());
    }

    #[test]
    fn missing_activation_scales_are_reported() {
        let m = build_model(&spec(6)).unwrap();
        let cfg = QuantConfig { group_size: 1, iterations: 1, lr: 1e-3, batch_size: 16, independent: false };
        let (mut qm, _) = quantize_model(&m, &calib(), &cfg).unwrap();
        qm.act_scales.clear();
        let err = quantized_forward(&qm, &[2, 5], &[1, 1], 1, 2, QuantRunMode::Integer);
        assert!(matches!(err, Err(QuantError::MissingScale(_))));
    }

    #[test]
    fn quantized_storage_shrinks_nearly_4x() {
        let m = build_model(&spec(7)).unwrap();
        let cfg = QuantConfig { group_size: 1, iterations: 1, lr: 1e-3, batch_size: 16, independent: false };
        let (qm, _) = quantize_model(&m, &calib(), &cfg).unwrap();
        let fp = storage_bytes(&m, StoragePrecision::Fp32).total;
        let q = qm.storage().total;
        let ratio = fp as f64 / q as f64;
        assert!(ratio > 3.0 && ratio < 4.0, "ratio {ratio}");
    }

    #[test]
    fn independent_mode_also_produces_a_working_model() {
        let m = build_model(&spec(8)).unwrap();
        let cfg = QuantConfig { group_size: 1, iterations: 2, lr: 1e-3, batch_size: 16, independent: true };
        let data = calib();
        let (qm, reports) = quantize_model(&m, &data, &cfg).unwrap();
        assert_eq!(reports.len(), 4);
        let exs: Vec<&crate::data::Example> = data.iter().take(4).collect();
        let b = make_batch(&exs, 8);
        let sim = quantized_forward(&qm, &b.ids, &b.mask, b.batch, b.seq, QuantRunMode::FloatSim)
            .unwrap();
        assert!(sim.all_finite());
    }

    #[test]
    fn report_csv_has_one_line_per_module() {
        let reports = vec![ModuleReport {
            name: "embedding".into(),
            initial_err: 1e-3,
            final_err: 5e-4,
            iterations: 10,
            trace: vec![1e-3, 5e-4],
        }];
        let csv = report_csv(&reports);
        assert!(csv.starts_with("module,initial_err,final_err,iterations\n"));
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.contains("embedding,"));
    }
}
