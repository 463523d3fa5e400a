//! Tape-based forward pass: full-model inference and the composable stage
//! functions (embedding, block, head) reused by distillation and
//! quantization calibration.

use std::collections::HashMap;

use crate::numerics::tape::{GradTape, NodeId, ParamSlot};
use crate::numerics::Tensor;

use super::{ModelError, ModelSpec, TransformerModel};

pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Copy, Default)]
pub struct Capture {
    pub hidden: bool,
    pub attention: bool,
    /// Capture the activation at every layer boundary (embedding output plus
    /// each block output); used by quantization calibration.
    pub layer_hidden: bool,
}

/// Maps canonical parameter names to tape nodes for one forward pass.
pub struct ModelBinding {
    nodes: HashMap<String, NodeId>,
    /// (model param index, tape slot) for every trainable parameter,
    /// in canonical parameter order.
    pub slots: Vec<(usize, ParamSlot)>,
}

impl ModelBinding {
    pub fn node(&self, name: &str) -> NodeId {
        *self
            .nodes
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn maybe(&self, name: &str) -> Option<NodeId> {
        self.nodes.get(name).copied()
    }

    /// Overrides a bound parameter node (used to splice fake-quantized
    /// weights into a calibration forward).
    pub fn set(&mut self, name: &str, node: NodeId) {
        self.nodes.insert(name.to_string(), node);
    }
}

/// Binds every model parameter onto the tape; `trainable` selects which
/// become gradient-carrying parameters (the rest are constants).
pub fn bind_model(
    tape: &mut GradTape,
    model: &TransformerModel,
    trainable: &dyn Fn(&str) -> bool,
) -> ModelBinding {
    let mut nodes = HashMap::new();
    let mut slots = Vec::new();
    for (idx, (name, tensor, _)) in model.param_entries().into_iter().enumerate() {
        let id = if trainable(&name) {
            let (id, slot) = tape.param(tensor.clone());
            slots.push((idx, slot));
            id
        } else {
            tape.constant(tensor.clone())
        };
        nodes.insert(name, id);
    }
    ModelBinding { nodes, slots }
}

pub fn bind_const(tape: &mut GradTape, model: &TransformerModel) -> ModelBinding {
    bind_model(tape, model, &|_| false)
}

pub fn bind_trainable(tape: &mut GradTape, model: &TransformerModel) -> ModelBinding {
    bind_model(tape, model, &|_| true)
}

/// Per-sample additive attention-mask rows: 0 for visible keys, -1e9 for
/// padded ones.
pub fn mask_bias_rows(tape: &mut GradTape, mask: &[u8], batch: usize, seq: usize) -> Vec<NodeId> {
    (0..batch)
        .map(|i| {
            let row: Vec<f64> = (0..seq)
                .map(|j| {
                    if mask[i * seq + j] == 1 {
                        0.0
                    } else {
                        MASK_NEG
                    }
                })
                .collect();
            tape.constant(Tensor::matrix(1, seq, row).unwrap())
        })
        .collect()
}

/// Token + position embeddings followed by layer norm; returns [B*s x h].
pub fn embed_forward(
    tape: &mut GradTape,
    binding: &ModelBinding,
    spec: &ModelSpec,
    ids: &[usize],
    batch: usize,
    seq: usize,
) -> NodeId {
    let table = binding.node("token_embedding");
    let mut x = tape.lookup(table, ids);
    if let Some(proj) = binding.maybe("embed_projection") {
        x = tape.matmul(x, proj);
    }
    let pos_ids: Vec<usize> = (0..batch * seq).map(|i| i % seq).collect();
    let pos_table = binding.node("position_embedding");
    let pos = tape.lookup(pos_table, &pos_ids);
    let sum = tape.add(x, pos);
    let gamma = binding.node("embed_ln_gamma");
    let beta = binding.node("embed_ln_beta");
    debug_assert!(seq <= spec.max_seq_len);
    tape.layer_norm(sum, gamma, beta)
}

/// One transformer block over the flattened [B*s x h] activation. Returns
/// the block output and, when requested, per-sample per-head attention maps.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    tape: &mut GradTape,
    binding: &ModelBinding,
    spec: &ModelSpec,
    prefix: &str,
    x: NodeId,
    batch: usize,
    seq: usize,
    mask_rows: &[NodeId],
    capture_attn: bool,
) -> (NodeId, Vec<Vec<NodeId>>) {
    let h = spec.hidden_dim;
    let dk = spec.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let p = |n: &str| format!("{prefix}{n}");

    let wq = binding.node(&p("wq"));
    let bq = binding.node(&p("bq"));
    let wk = binding.node(&p("wk"));
    let bk = binding.node(&p("bk"));
    let wv = binding.node(&p("wv"));
    let bv = binding.node(&p("bv"));
    let q_all = {
        let m = tape.matmul(x, wq);
        tape.add_row(m, bq)
    };
    let k_all = {
        let m = tape.matmul(x, wk);
        tape.add_row(m, bk)
    };
    let v_all = {
        let m = tape.matmul(x, wv);
        tape.add_row(m, bv)
    };

    let mut sample_ctx = Vec::with_capacity(batch);
    let mut attn_maps: Vec<Vec<NodeId>> = Vec::new();
    for i in 0..batch {
        let q_i = tape.slice_rows(q_all, i * seq, seq);
        let k_i = tape.slice_rows(k_all, i * seq, seq);
        let v_i = tape.slice_rows(v_all, i * seq, seq);
        let mut head_ctx = Vec::with_capacity(spec.num_heads);
        let mut head_attn = Vec::with_capacity(spec.num_heads);
        for head in 0..spec.num_heads {
            let q_h = tape.slice_cols(q_i, head * dk, dk);
            let k_h = tape.slice_cols(k_i, head * dk, dk);
            let v_h = tape.slice_cols(v_i, head * dk, dk);
            let k_t = tape.transpose(k_h);
            let scores = tape.matmul(q_h, k_t);
            let scaled = tape.scale(scores, scale);
            let masked = tape.add_row(scaled, mask_rows[i]);
            let attn = tape.softmax_rows(masked);
            if capture_attn {
                head_attn.push(attn);
            }
            head_ctx.push(tape.matmul(attn, v_h));
        }
        sample_ctx.push(tape.concat_cols(&head_ctx));
        if capture_attn {
            attn_maps.push(head_attn);
        }
    }
    let ctx = tape.concat_rows(&sample_ctx);
    debug_assert_eq!(tape.value(ctx).cols(), h);

    let wo = binding.node(&p("wo"));
    let bo = binding.node(&p("bo"));
    let attn_out = {
        let m = tape.matmul(ctx, wo);
        tape.add_row(m, bo)
    };
    let res1 = tape.add(x, attn_out);
    let ln1g = binding.node(&p("ln1_gamma"));
    let ln1b = binding.node(&p("ln1_beta"));
    let x1 = tape.layer_norm(res1, ln1g, ln1b);

    let w1 = binding.node(&p("w_ff1"));
    let b1 = binding.node(&p("b_ff1"));
    let w2 = binding.node(&p("w_ff2"));
    let b2 = binding.node(&p("b_ff2"));
    let ff = {
        let m = tape.matmul(x1, w1);
        let a = tape.add_row(m, b1);
        let g = tape.gelu(a);
        let m2 = tape.matmul(g, w2);
        tape.add_row(m2, b2)
    };
    let res2 = tape.add(x1, ff);
    let ln2g = binding.node(&p("ln2_gamma"));
    let ln2b = binding.node(&p("ln2_beta"));
    (tape.layer_norm(res2, ln2g, ln2b), attn_maps)
}

/// Masked mean over each sample's unmasked positions: [B*s x h] -> [B x h].
pub fn masked_mean(
    tape: &mut GradTape,
    x: NodeId,
    mask: &[u8],
    batch: usize,
    seq: usize,
) -> NodeId {
    let mut rows = Vec::with_capacity(batch);
    for i in 0..batch {
        let m = &mask[i * seq..(i + 1) * seq];
        let count = m.iter().filter(|&&v| v == 1).count().max(1) as f64;
        let weights: Vec<f64> = m
            .iter()
            .map(|&v| if v == 1 { 1.0 / count } else { 0.0 })
            .collect();
        let w = tape.constant(Tensor::matrix(1, seq, weights).unwrap());
        let sample = tape.slice_rows(x, i * seq, seq);
        rows.push(tape.matmul(w, sample));
    }
    tape.concat_rows(&rows)
}

/// Pooler (tanh over the first token) and classifier; applies the projector
/// when the head operates in a wider space than the encoder.
pub fn head_forward(
    tape: &mut GradTape,
    binding: &ModelBinding,
    x: NodeId,
    batch: usize,
    seq: usize,
    hidden_dim: usize,
) -> NodeId {
    let mut cls_rows = Vec::with_capacity(batch);
    for i in 0..batch {
        cls_rows.push(tape.slice_rows(x, i * seq, 1));
    }
    let mut cls = tape.concat_rows(&cls_rows);
    let pooler_w = binding.node("pooler_w");
    let head_width = tape.value(pooler_w).shape()[0];
    if head_width != hidden_dim {
        let pw = binding.node("projector_w");
        let pb = binding.node("projector_b");
        let m = tape.matmul(cls, pw);
        cls = tape.add_row(m, pb);
    }
    let pooler_b = binding.node("pooler_b");
    let pooled = {
        let m = tape.matmul(cls, pooler_w);
        let a = tape.add_row(m, pooler_b);
        tape.tanh(a)
    };
    let cw = binding.node("classifier_w");
    let cb = binding.node("classifier_b");
    let m = tape.matmul(pooled, cw);
    tape.add_row(m, cb)
}

/// Projects pooled hidden states through the student-side bridge, when one
/// is bound; identity otherwise.
pub fn project_pooled(tape: &mut GradTape, binding: &ModelBinding, pooled: NodeId) -> NodeId {
    match binding.maybe("projector_w") {
        Some(pw) => {
            let pb = binding.node("projector_b");
            let m = tape.matmul(pooled, pw);
            tape.add_row(m, pb)
        }
        None => pooled,
    }
}

pub struct TapeTrace {
    pub logits: NodeId,
    /// Masked-mean of the last-layer sequence output, pre-projector: [B x h].
    pub pooled_hidden: NodeId,
    /// Same, passed through the projector when present.
    pub pooled_projected: NodeId,
    pub hidden_flat: NodeId,
    /// layer -> sample -> head attention maps (empty unless captured).
    pub attention: Vec<Vec<Vec<NodeId>>>,
    /// Embedding output plus each block output (empty unless captured).
    pub layer_hidden: Vec<NodeId>,
}

pub fn forward_on_tape(
    tape: &mut GradTape,
    binding: &ModelBinding,
    model: &TransformerModel,
    ids: &[usize],
    mask: &[u8],
    batch: usize,
    seq: usize,
    capture: Capture,
) -> TapeTrace {
    let spec = &model.spec;
    let mut x = embed_forward(tape, binding, spec, ids, batch, seq);
    let mask_rows = mask_bias_rows(tape, mask, batch, seq);
    let mut attention = Vec::new();
    let mut layer_hidden = Vec::new();
    if capture.layer_hidden {
        layer_hidden.push(x);
    }
    for layer in 0..spec.num_layers {
        let prefix = format!("block{}.", model.block_index(layer));
        let want_attn = capture.attention;
        let (next, attn) =
            block_forward(tape, binding, spec, &prefix, x, batch, seq, &mask_rows, want_attn);
        x = next;
        if want_attn {
            attention.push(attn);
        }
        if capture.layer_hidden {
            layer_hidden.push(x);
        }
    }
    let pooled_hidden = masked_mean(tape, x, mask, batch, seq);
    let pooled_projected = project_pooled(tape, binding, pooled_hidden);
    let logits = head_forward(tape, binding, x, batch, seq, spec.hidden_dim);
    TapeTrace {
        logits,
        pooled_hidden,
        pooled_projected,
        hidden_flat: x,
        attention,
        layer_hidden,
    }
}

/// Forward-pass results as plain tensors.
pub struct ForwardTrace {
    pub logits: Tensor,
    pub pooled_hidden: Tensor,
    pub pooled_projected: Tensor,
    /// Per-sample [s x h] last-layer hidden states.
    pub hidden: Option<Vec<Tensor>>,
    /// layer -> sample -> head [s x s] attention maps.
    pub attention: Option<Vec<Vec<Vec<Tensor>>>>,
    /// Flat [B*s x h] activation at each layer boundary.
    pub layer_hidden: Option<Vec<Tensor>>,
    pub batch: usize,
    pub seq: usize,
}

pub fn forward(
    model: &TransformerModel,
    ids: &[usize],
    mask: &[u8],
    batch: usize,
    seq: usize,
    capture: Capture,
) -> Result<ForwardTrace, ModelError> {
    assert_eq!(ids.len(), batch * seq, "ids length mismatch");
    assert_eq!(mask.len(), batch * seq, "mask length mismatch");
    if let Some(&bad) = ids.iter().find(|&&i| i >= model.spec.vocab_size) {
        return Err(ModelError::Vocab { id: bad, size: model.spec.vocab_size });
    }
    if mask.iter().any(|&m| m > 1) {
        return Err(ModelError::Spec("mask values must be 0 or 1".into()));
    }
    let mut tape = GradTape::new();
    let binding = bind_const(&mut tape, model);
    let trace = forward_on_tape(&mut tape, &binding, model, ids, mask, batch, seq, capture);
    let hidden = capture.hidden.then(|| {
        (0..batch)
            .map(|i| {
                let flat = tape.value(trace.hidden_flat);
                let cols = flat.cols();
                let data = flat.data()[i * seq * cols..(i + 1) * seq * cols].to_vec();
                Tensor::matrix(seq, cols, data).unwrap()
            })
            .collect()
    });
    let attention = capture.attention.then(|| {
        trace
            .attention
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|sample| sample.iter().map(|&a| tape.value(a).clone()).collect())
                    .collect()
            })
            .collect()
    });
    let layer_hidden = capture
        .layer_hidden
        .then(|| trace.layer_hidden.iter().map(|&n| tape.value(n).clone()).collect());
    Ok(ForwardTrace {
        logits: tape.value(trace.logits).clone(),
        pooled_hidden: tape.value(trace.pooled_hidden).clone(),
        pooled_projected: tape.value(trace.pooled_projected).clone(),
        hidden,
        attention,
        layer_hidden,
        batch,
        seq,
    })
}
