//! Teacher fine-tuning, masked-token pretraining, and cross-distillation.
//!
//! Distillation couples a frozen-or-slow teacher and a fast student on the
//! same batch. Each side minimizes its task loss plus a hidden-state MSE
//! alignment term and a KL term between the two logit distributions; in the
//! cross mode the teacher takes a small step first and the student follows
//! at a larger rate, so the teacher drifts toward states the student can
//! imitate while staying anchored by its own task loss.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_batch, shuffled_indices, Batch, Example};
use crate::model::forward::{
    bind_const, bind_model, bind_trainable, forward, forward_on_tape, Capture, ModelBinding,
};
use crate::model::{ensure_projector, integrate_head, ModelError, TransformerModel};
use crate::numerics::precision::round_slice;
use crate::numerics::tape::{GradTape, Gradients, NodeId, ParamSlot};
use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("distillation plan error: {0}")]
    Plan(String),
    #[error("non-finite loss during {0}; parameters restored to the last epoch boundary")]
    NonFinite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillMode {
    /// Classic distillation: frozen teacher, no head transplant.
    Kd,
    /// Head transplant from the teacher, then frozen-teacher distillation.
    PiKd,
    /// Head transplant plus alternating teacher/student updates.
    CrossKd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillPlan {
    pub mode: DistillMode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Teacher learning rate (used only by the cross mode).
    pub lambda_teacher: f64,
    /// Student learning rate; must exceed the teacher's.
    pub lambda_student: f64,
    /// Weight of the hidden-state MSE alignment term.
    pub beta_mse: f64,
    /// Weight of the logit KL term.
    pub beta_kl: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Keep the transplanted pooler/classifier fixed during student steps.
    #[serde(default)]
    pub freeze_integrated_head: bool,
    /// Run the student update before the teacher update (cross mode only).
    #[serde(default)]
    pub swap_order: bool,
    #[serde(default)]
    pub max_steps_per_epoch: Option<usize>,
}

impl DistillPlan {
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(DistillError::Plan("epochs and batch_size must be positive".into()));
        }
        if self.lambda_student <= 0.0 || self.lambda_teacher < 0.0 {
            return Err(DistillError::Plan(
                "student rate must be positive and teacher rate non-negative".into(),
            ));
        }
        if self.mode == DistillMode::CrossKd && self.lambda_teacher >= self.lambda_student {
            return Err(DistillError::Plan(format!(
                "teacher rate {} must stay below student rate {}",
                self.lambda_teacher, self.lambda_student
            )));
        }
        if self.beta_mse < 0.0 || self.beta_kl < 0.0 {
            return Err(DistillError::Plan("loss weights must be non-negative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(DistillError::Plan("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state aligned with the model's canonical parameter order. Create it
/// only after the parameter list is final (head transplant, projector).
pub struct Adam {
    hyper: AdamHyper,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(model: &TransformerModel, hyper: AdamHyper) -> Self {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, t, _) in model.param_entries() {
            m.push(Tensor::zeros_like(t));
            v.push(Tensor::zeros_like(t));
        }
        Adam { hyper, t: 0, m, v }
    }

    /// One update over the tape-bound parameters. A zero learning rate is a
    /// strict no-op: neither the weights nor the moment buffers advance.
    pub fn step(
        &mut self,
        model: &mut TransformerModel,
        slots: &[(usize, ParamSlot)],
        grads: &Gradients,
        lr: f64,
    ) {
        if lr == 0.0 {
            return;
        }
        self.t += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut entries = model.param_entries_mut();
        for &(idx, slot) in slots {
            let g = grads.by_slot(slot);
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let w = entries[idx].1.data_mut();
            for i in 0..g.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            round_slice(w);
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub task: f64,
    pub mse: f64,
    pub kl: f64,
    pub total: f64,
}

/// Builds both forward passes and the composite loss on one tape. The task
/// term belongs to whichever side is training; the MSE and KL terms couple
/// the two models.
#[allow(clippy::too_many_arguments)]
fn joint_loss(
    tape: &mut GradTape,
    teacher: &TransformerModel,
    student: &TransformerModel,
    tb: &ModelBinding,
    sb: &ModelBinding,
    batch: &Batch,
    plan: &DistillPlan,
    teacher_is_task: bool,
) -> Result<(NodeId, LossParts), DistillError> {
    let t_trace = forward_on_tape(
        tape,
        tb,
        teacher,
        &batch.ids,
        &batch.mask,
        batch.batch,
        batch.seq,
        Capture::default(),
    );
    let s_trace = forward_on_tape(
        tape,
        sb,
        student,
        &batch.ids,
        &batch.mask,
        batch.batch,
        batch.seq,
        Capture::default(),
    );
    let task_logits = if teacher_is_task { t_trace.logits } else { s_trace.logits };
    let task = tape.cross_entropy(task_logits, &batch.labels);
    let mut terms = vec![(task, 1.0)];
    let mut parts = LossParts {
        task: tape.value(task).scalar_value(),
        mse: 0.0,
        kl: 0.0,
        total: 0.0,
    };
    if plan.beta_mse > 0.0 {
        let mse = tape.mse_pair(t_trace.pooled_hidden, s_trace.pooled_projected);
        parts.mse = tape.value(mse).scalar_value();
        terms.push((mse, plan.beta_mse));
    }
    if plan.beta_kl > 0.0 {
        let kl = tape.kl_div_logits(t_trace.logits, s_trace.logits, plan.temperature);
        parts.kl = tape.value(kl).scalar_value();
        terms.push((kl, plan.beta_kl));
    }
    let total = tape.add_scaled(&terms);
    parts.total = tape.value(total).scalar_value();
    if !parts.total.is_finite() {
        let side = if teacher_is_task { "teacher step" } else { "student step" };
        return Err(DistillError::NonFinite(side.into()));
    }
    Ok((total, parts))
}

/// One teacher update against a fixed student snapshot.
pub fn teacher_step(
    teacher: &mut TransformerModel,
    student: &TransformerModel,
    batch: &Batch,
    plan: &DistillPlan,
    adam: &mut Adam,
) -> Result<LossParts, DistillError> {
    let mut tape = GradTape::new();
    let tb = bind_trainable(&mut tape, teacher);
    let sb = bind_const(&mut tape, student);
    let (total, parts) = joint_loss(&mut tape, teacher, student, &tb, &sb, batch, plan, true)?;
    let grads = tape.backward(total)?;
    adam.step(teacher, &tb.slots, &grads, plan.lambda_teacher);
    Ok(parts)
}

/// One student update against a fixed teacher snapshot.
pub fn student_step(
    teacher: &TransformerModel,
    student: &mut TransformerModel,
    batch: &Batch,
    plan: &DistillPlan,
    adam: &mut Adam,
) -> Result<LossParts, DistillError> {
    let mut tape = GradTape::new();
    let tb = bind_const(&mut tape, teacher);
    let freeze = plan.freeze_integrated_head;
    let sb = bind_model(&mut tape, student, &move |name: &str| {
        !(freeze && (name.starts_with("pooler") || name.starts_with("classifier")))
    });
    let (total, parts) = joint_loss(&mut tape, teacher, student, &tb, &sb, batch, plan, false)?;
    let grads = tape.backward(total)?;
    adam.step(student, &sb.slots, &grads, plan.lambda_student);
    Ok(parts)
}

/// One plain task (cross-entropy) update.
pub fn task_step(
    model: &mut TransformerModel,
    batch: &Batch,
    lr: f64,
    adam: &mut Adam,
) -> Result<f64, DistillError> {
    let mut tape = GradTape::new();
    let binding = bind_trainable(&mut tape, model);
    let trace = forward_on_tape(
        &mut tape,
        &binding,
        model,
        &batch.ids,
        &batch.mask,
        batch.batch,
        batch.seq,
        Capture::default(),
    );
    let task = tape.cross_entropy(trace.logits, &batch.labels);
    let total = tape.add_scaled(&[(task, 1.0)]);
    let loss = tape.value(total).scalar_value();
    if !loss.is_finite() {
        return Err(DistillError::NonFinite("task step".into()));
    }
    let grads = tape.backward(total)?;
    adam.step(model, &binding.slots, &grads, lr);
    Ok(loss)
}

/// Loss value plus per-parameter analytic gradients of one side's joint
/// objective, the other side held constant. Used by gradient checking.
pub fn loss_and_grads(
    teacher: &TransformerModel,
    student: &TransformerModel,
    batch: &Batch,
    plan: &DistillPlan,
    teacher_side: bool,
) -> Result<(f64, Vec<(String, Tensor)>), DistillError> {
    let mut tape = GradTape::new();
    let (tb, sb) = if teacher_side {
        let tb = bind_trainable(&mut tape, teacher);
        let sb = bind_const(&mut tape, student);
        (tb, sb)
    } else {
        let tb = bind_const(&mut tape, teacher);
        let sb = bind_trainable(&mut tape, student);
        (tb, sb)
    };
    let (total, parts) =
        joint_loss(&mut tape, teacher, student, &tb, &sb, batch, plan, teacher_side)?;
    let grads = tape.backward(total)?;
    let (trainable, binding) = if teacher_side { (teacher, &tb) } else { (student, &sb) };
    let entries = trainable.param_entries();
    let named = binding
        .slots
        .iter()
        .map(|&(idx, slot)| (entries[idx].0.clone(), grads.by_slot(slot).clone()))
        .collect();
    Ok((parts.total, named))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub teacher_loss: f64,
    pub student_loss: f64,
    pub student_task_loss: f64,
    pub eval_acc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,teacher_loss,student_loss,student_task_loss,eval_acc,seconds\n");
        for e in &self.epochs {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.3}",
                e.epoch, e.teacher_loss, e.student_loss, e.student_task_loss, e.eval_acc, e.seconds
            )
            .expect("string write");
        }
        out
    }
}

/// Runs the selected distillation mode to completion. The teacher is only
/// mutated in the cross mode. On a non-finite loss both models roll back to
/// the last epoch boundary and the error propagates.
pub fn run_distillation(
    teacher: &mut TransformerModel,
    student: &mut TransformerModel,
    train: &[Example],
    eval: &[Example],
    plan: &DistillPlan,
) -> Result<TrainHistory, DistillError> {
    plan.validate()?;
    if train.is_empty() {
        return Err(DistillError::Plan("empty training set".into()));
    }
    if plan.mode != DistillMode::Kd {
        integrate_head(teacher, student)?;
    }
    if teacher.spec.hidden_dim != student.spec.hidden_dim {
        ensure_projector(student, teacher.spec.hidden_dim);
    }
    let mut adam_t = Adam::new(teacher, AdamHyper::default());
    let mut adam_s = Adam::new(student, AdamHyper::default());
    let max_seq = teacher.spec.max_seq_len.min(student.spec.max_seq_len);
    let mut history = TrainHistory::default();

    for epoch in 0..plan.epochs {
        let start = Instant::now();
        let snapshot = (teacher.clone(), student.clone());
        let order = shuffled_indices(train.len(), plan.seed, epoch as u64);
        let mut sums = (0.0f64, 0.0f64, 0.0f64); // teacher, student, student task
        let mut steps = 0usize;
        let result = (|| -> Result<(), DistillError> {
            for chunk in order.chunks(plan.batch_size) {
                if let Some(cap) = plan.max_steps_per_epoch {
                    if steps >= cap {
                        break;
                    }
                }
                let exs: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
                let batch = make_batch(&exs, max_seq);
                match plan.mode {
                    DistillMode::CrossKd => {
                        if plan.swap_order {
                            let sp = student_step(teacher, student, &batch, plan, &mut adam_s)?;
                            let tp = teacher_step(teacher, student, &batch, plan, &mut adam_t)?;
                            sums.0 += tp.total;
                            sums.1 += sp.total;
                            sums.2 += sp.task;
                        } else {
                            let tp = teacher_step(teacher, student, &batch, plan, &mut adam_t)?;
                            let sp = student_step(teacher, student, &batch, plan, &mut adam_s)?;
                            sums.0 += tp.total;
                            sums.1 += sp.total;
                            sums.2 += sp.task;
                        }
                    }
                    DistillMode::Kd | DistillMode::PiKd => {
                        let sp = student_step(teacher, student, &batch, plan, &mut adam_s)?;
                        sums.1 += sp.total;
                        sums.2 += sp.task;
                    }
                }
                steps += 1;
            }
            Ok(())
        })();
        if let Err(e) = result {
            *teacher = snapshot.0;
            *student = snapshot.1;
            return Err(e);
        }
        let n = steps.max(1) as f64;
        history.epochs.push(EpochStats {
            epoch: epoch + 1,
            teacher_loss: sums.0 / n,
            student_loss: sums.1 / n,
            student_task_loss: sums.2 / n,
            eval_acc: eval_accuracy(student, eval, 32),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub eval_acc: f64,
    pub seconds: f64,
}

pub fn task_history_csv(history: &[TaskEpoch]) -> String {
    let mut out = String::from("epoch,loss,eval_acc,seconds\n");
    for e in history {
        writeln!(out, "{},{:.6},{:.6},{:.3}", e.epoch, e.loss, e.eval_acc, e.seconds)
            .expect("string write");
    }
    out
}

/// Supervised fine-tuning on the task loss alone. `max_steps` caps the total
/// update count across epochs.
#[allow(clippy::too_many_arguments)]
pub fn finetune_teacher(
    model: &mut TransformerModel,
    train: &[Example],
    eval: &[Example],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    max_steps: Option<usize>,
) -> Result<Vec<TaskEpoch>, DistillError> {
    if epochs == 0 || batch_size == 0 || lr <= 0.0 {
        return Err(DistillError::Plan("fine-tuning needs positive epochs, batch, rate".into()));
    }
    if train.is_empty() {
        return Err(DistillError::Plan("empty training set".into()));
    }
    let mut adam = Adam::new(model, AdamHyper::default());
    let mut history = Vec::new();
    let mut total_steps = 0usize;
    for epoch in 0..epochs {
        let start = Instant::now();
        let snapshot = model.clone();
        let order = shuffled_indices(train.len(), seed, epoch as u64);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(batch_size) {
            if max_steps.is_some_and(|cap| total_steps >= cap) {
                break;
            }
            let exs: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = make_batch(&exs, model.spec.max_seq_len);
            match task_step(model, &batch, lr, &mut adam) {
                Ok(loss) => sum += loss,
                Err(e) => {
                    *model = snapshot;
                    return Err(e);
                }
            }
            steps += 1;
            total_steps += 1;
        }
        history.push(TaskEpoch {
            epoch: epoch + 1,
            loss: sum / steps.max(1) as f64,
            eval_acc: eval_accuracy(model, eval, 32),
            seconds: start.elapsed().as_secs_f64(),
        });
        if max_steps.is_some_and(|cap| total_steps >= cap) {
            break;
        }
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of real tokens selected for prediction.
    pub mask_prob: f64,
    pub seed: u64,
    #[serde(default)]
    pub max_steps: Option<usize>,
}

/// Masked-token pretraining with tied input/output embeddings. Selected
/// positions are replaced by the mask token 80% of the time, a random token
/// 10%, and left alone 10%; the model predicts the original id from the
/// final hidden state through the transposed embedding table.
pub fn pretrain_student_mlm(
    model: &mut TransformerModel,
    train: &[Example],
    cfg: &MlmConfig,
) -> Result<Vec<TaskEpoch>, DistillError> {
    use rand::{Rng, SeedableRng};
    if !(0.0..=1.0).contains(&cfg.mask_prob) {
        return Err(DistillError::Plan("mask_prob must lie in [0, 1]".into()));
    }
    if cfg.epochs > 0 && (cfg.batch_size == 0 || cfg.lr <= 0.0) {
        return Err(DistillError::Plan("pretraining needs positive batch and rate".into()));
    }
    let vocab = model.spec.vocab_size;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6c6d);
    let mut adam = Adam::new(model, AdamHyper::default());
    let mut history = Vec::new();
    let mut total_steps = 0usize;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = shuffled_indices(train.len(), cfg.seed, epoch as u64);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|cap| total_steps >= cap) {
                break;
            }
            let exs: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let mut batch = make_batch(&exs, model.spec.max_seq_len);
            // choose positions and corrupt the input
            let mut positions = Vec::new();
            let mut labels = Vec::new();
            for r in 0..batch.batch {
                for c in 1..batch.seq {
                    let i = r * batch.seq + c;
                    if batch.mask[i] == 1 && rng.gen_bool(cfg.mask_prob) {
                        positions.push(i);
                        labels.push(batch.ids[i]);
                        let roll: f64 = rng.gen();
                        if roll < 0.8 {
                            batch.ids[i] = crate::vocab::MASK_ID;
                        } else if roll < 0.9 {
                            batch.ids[i] =
                                crate::vocab::NUM_RESERVED + rng.gen_range(0..vocab - crate::vocab::NUM_RESERVED);
                        }
                    }
                }
            }
            if positions.is_empty() {
                continue;
            }
            let mut tape = GradTape::new();
            let binding = bind_trainable(&mut tape, model);
            let trace = forward_on_tape(
                &mut tape,
                &binding,
                model,
                &batch.ids,
                &batch.mask,
                batch.batch,
                batch.seq,
                Capture::default(),
            );
            let mut x = tape.lookup(trace.hidden_flat, &positions);
            if let Some(proj) = binding.maybe("embed_projection") {
                let pt = tape.transpose(proj);
                x = tape.matmul(x, pt);
            }
            let emb = binding.node("token_embedding");
            let emb_t = tape.transpose(emb);
            let logits = tape.matmul(x, emb_t);
            let task = tape.cross_entropy(logits, &labels);
            let total = tape.add_scaled(&[(task, 1.0)]);
            let loss = tape.value(total).scalar_value();
            if !loss.is_finite() {
                return Err(DistillError::NonFinite("masked-token pretraining".into()));
            }
            let grads = tape.backward(total)?;
            adam.step(model, &binding.slots, &grads, cfg.lr);
            sum += loss;
            steps += 1;
            total_steps += 1;
        }
        history.push(TaskEpoch {
            epoch: epoch + 1,
            loss: if steps > 0 { sum / steps as f64 } else { 0.0 },
            eval_acc: 0.0,
            seconds: start.elapsed().as_secs_f64(),
        });
        if cfg.max_steps.is_some_and(|cap| total_steps >= cap) {
            break;
        }
    }
    Ok(history)
}

/// Argmax classification accuracy; ties resolve to the lowest class id.
pub fn eval_accuracy(model: &TransformerModel, examples: &[Example], batch_size: usize) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let exs: Vec<&Example> = chunk.iter().collect();
        let batch = make_batch(&exs, model.spec.max_seq_len);
        let trace = forward(model, &batch.ids, &batch.mask, batch.batch, batch.seq, Capture::default())
            .expect("evaluation forward failed");
        for (r, &label) in batch.labels.iter().enumerate() {
            let row = trace.logits.row(r);
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
    correct as f64 / examples.len() as f64
}
