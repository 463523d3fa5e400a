//! Reverse-mode gradient tape over dense tensors.
//!
//! Operations are recorded in evaluation order during the forward pass and
//! replayed in reverse for gradients. One tape per training step; never
//! shared across concurrent steps.

use super::ops;
use super::precision::round_value;
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Index into the tape's parameter registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param,
    /// Row gather: out[r] = src[ids[r]].
    Lookup { src: NodeId, ids: Vec<usize> },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// [r x c] plus a broadcast [1 x c] row.
    AddRow { x: NodeId, row: NodeId },
    Scale { x: NodeId, c: f64 },
    /// Weighted sum of same-shaped nodes.
    AddScaled(Vec<(NodeId, f64)>),
    Gelu(NodeId),
    Tanh(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    /// KL(softmax(target/T) || softmax(pred/T)), mean over rows.
    KlDivLogits { target: NodeId, pred: NodeId, temp: f64 },
    MsePair(NodeId, NodeId),
    /// Straight-through fake quantization: s * clamp(round(w/s), -127, 127).
    FakeQuant { w: NodeId, step: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<usize>, // node index per slot
}

/// Per-slot gradients produced by a backward pass.
pub struct Gradients {
    slots: Vec<Tensor>,
}

impl Gradients {
    pub fn by_slot(&self, slot: ParamSlot) -> &Tensor {
        &self.slots[slot.0]
    }

    pub fn into_slots(self) -> Vec<Tensor> {
        self.slots
    }
}

const LN_EPS: f64 = 1e-12;
const QCLIP: f64 = 127.0;

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value: value.finalized(), op });
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        // constants pass through untouched; precision applies to computed values
        self.nodes.push(Node { value, op: Op::Const });
        id
    }

    pub fn param(&mut self, value: Tensor) -> (NodeId, ParamSlot) {
        let slot = ParamSlot(self.params.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op: Op::Param });
        self.params.push(id.0);
        (id, slot)
    }

    pub fn lookup(&mut self, src: NodeId, ids: &[usize]) -> NodeId {
        let table = self.value(src);
        let cols = table.cols();
        let rows = table.rows();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            assert!(i < rows, "lookup row {i} out of {rows}");
            data.extend_from_slice(table.row(i));
        }
        let value = Tensor::matrix(ids.len(), cols, data).unwrap();
        self.push(value, Op::Lookup { src, ids: ids.to_vec() })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).transposed();
        self.push(value, Op::Transpose(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let xv = self.value(x);
        let rv = self.value(row);
        let cols = xv.cols();
        assert_eq!(rv.len(), cols, "add_row width mismatch");
        let mut out = xv.clone();
        {
            let data = out.data_mut();
            for r in 0..data.len() / cols {
                for c in 0..cols {
                    data[r * cols + c] += rv.data()[c];
                }
            }
        }
        self.push(out, Op::AddRow { x, row })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c })
    }

    pub fn add_scaled(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        assert!(!terms.is_empty());
        let mut value = Tensor::zeros_like(self.value(terms[0].0));
        for &(id, w) in terms {
            let t = self.value(id);
            assert_eq!(t.shape(), value.shape(), "add_scaled shape mismatch");
            for (o, &v) in value.data_mut().iter_mut().zip(t.data()) {
                *o += w * v;
            }
        }
        self.push(value, Op::AddScaled(terms.to_vec()))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(ops::gelu);
        self.push(value, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        let cols = value.cols();
        for r in 0..value.rows() {
            ops::softmax_row_in_place(&mut value.data_mut()[r * cols..(r + 1) * cols]);
        }
        self.push(value, Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let cols = xv.cols();
        assert_eq!(g.len(), cols);
        assert_eq!(b.len(), cols);
        let mut out = xv.clone();
        {
            let data = out.data_mut();
            for r in 0..data.len() / cols {
                let row = &mut data[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                for (c, v) in row.iter_mut().enumerate() {
                    *v = g.data()[c] * ((*v - mean) * inv) + b.data()[c];
                }
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta })
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let cols = xv.cols();
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::matrix(len, cols, data).unwrap();
        self.push(value, Op::SliceRows { x, start, len })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let cols = xv.cols();
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::matrix(rows, len, data).unwrap();
        self.push(value, Op::SliceCols { x, start, len })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows width mismatch");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, cols, data).unwrap();
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols height mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data).unwrap();
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let value = ops::cross_entropy(self.value(logits), labels)
            .expect("cross_entropy preconditions violated on tape");
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy { logits, labels: labels.to_vec() },
        )
    }

    pub fn kl_div_logits(&mut self, target: NodeId, pred: NodeId, temp: f64) -> NodeId {
        assert!(temp > 0.0);
        let (p, q) = self.kl_softmaxes(target, pred, temp);
        let value = ops::kl_divergence(&p, &q).expect("kl_div_logits shape mismatch");
        self.push(Tensor::scalar(value), Op::KlDivLogits { target, pred, temp })
    }

    pub fn mse_pair(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = ops::mse(self.value(a), self.value(b)).expect("mse_pair shape mismatch");
        self.push(Tensor::scalar(value), Op::MsePair(a, b))
    }

    pub fn fake_quant(&mut self, w: NodeId, step: NodeId) -> NodeId {
        let s = self.value(step).scalar_value();
        assert!(s > 0.0, "fake_quant step must be positive");
        let value = self
            .value(w)
            .map(|v| s * (v / s).round().clamp(-QCLIP, QCLIP));
        self.push(value, Op::FakeQuant { w, step })
    }

    fn kl_softmaxes(&self, target: NodeId, pred: NodeId, temp: f64) -> (Tensor, Tensor) {
        let scale = |t: &Tensor| {
            let mut v = t.map(|x| x / temp);
            let cols = v.cols();
            for r in 0..v.rows() {
                ops::softmax_row_in_place(&mut v.data_mut()[r * cols..(r + 1) * cols]);
            }
            v
        };
        (scale(self.value(target)), scale(self.value(pred)))
    }

    /// Reverse pass from a scalar loss node. Every registered parameter gets
    /// a gradient; parameters unreachable from the loss get exact zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumericsError> {
        if loss.0 >= self.nodes.len() {
            return Err(NumericsError::StaleTape(loss.0));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumericsError::NonScalarLoss);
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Param => {
                    // restore for slot collection below
                    grads[idx] = Some(g);
                }
                Op::Lookup { src, ids } => {
                    let table = &self.nodes[src.0].value;
                    let cols = table.cols();
                    let mut contrib = Tensor::zeros_like(table);
                    for (r, &i) in ids.iter().enumerate() {
                        let grow = g.row(r);
                        let dst = &mut contrib.data_mut()[i * cols..(i + 1) * cols];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                    accum(&mut grads, *src, contrib);
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let ga = g.matmul(&bv.transposed());
                    let gb = av.transposed().matmul(&g);
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Transpose(x) => {
                    accum(&mut grads, *x, g.transposed());
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g);
                }
                Op::AddRow { x, row } => {
                    let cols = g.cols();
                    let mut rg = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (c, acc) in rg.iter_mut().enumerate() {
                            *acc += g.at(r, c);
                        }
                    }
                    let shape = self.nodes[row.0].value.shape().to_vec();
                    accum(&mut grads, *row, Tensor::new(shape, rg).unwrap());
                    accum(&mut grads, *x, g);
                }
                Op::Scale { x, c } => {
                    accum(&mut grads, *x, g.map(|v| v * c));
                }
                Op::AddScaled(terms) => {
                    for &(id, w) in terms {
                        if w != 0.0 {
                            accum(&mut grads, id, g.map(|v| v * w));
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = &self.nodes[x.0].value;
                    accum(&mut grads, *x, g.zip(xv, |gv, v| gv * ops::gelu_grad(v)));
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[idx].value;
                    accum(&mut grads, *x, g.zip(y, |gv, t| gv * (1.0 - t * t)));
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.nodes[idx].value;
                    let cols = y.cols();
                    let mut gx = Tensor::zeros_like(y);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let dst = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                        for (c, d) in dst.iter_mut().enumerate() {
                            *d = yr[c] * (gr[c] - dot);
                        }
                    }
                    accum(&mut grads, *x, gx);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gamma.0].value;
                    let cols = xv.cols();
                    let rows = xv.len() / cols;
                    let mut gx = Tensor::zeros_like(xv);
                    let mut ggamma = vec![0.0; cols];
                    let mut gbeta = vec![0.0; cols];
                    for r in 0..rows {
                        let xr = &xv.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let mean = xr.iter().sum::<f64>() / cols as f64;
                        let var =
                            xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> = gr
                            .iter()
                            .zip(gv.data())
                            .map(|(&gg, &gam)| gg * gam)
                            .collect();
                        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                        let m2 = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(&d, &h)| d * h)
                            .sum::<f64>()
                            / cols as f64;
                        let dst = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dst[c] = inv * (dxhat[c] - m1 - xhat[c] * m2);
                            ggamma[c] += gr[c] * xhat[c];
                            gbeta[c] += gr[c];
                        }
                    }
                    let gshape = self.nodes[gamma.0].value.shape().to_vec();
                    let bshape = self.nodes[beta.0].value.shape().to_vec();
                    accum(&mut grads, *x, gx);
                    accum(&mut grads, *gamma, Tensor::new(gshape, ggamma).unwrap());
                    accum(&mut grads, *beta, Tensor::new(bshape, gbeta).unwrap());
                }
                Op::SliceRows { x, start, len } => {
                    let xv = &self.nodes[x.0].value;
                    let cols = xv.cols();
                    let mut gx = Tensor::zeros_like(xv);
                    gx.data_mut()[start * cols..(start + len) * cols].copy_from_slice(g.data());
                    accum(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start, len } => {
                    let xv = &self.nodes[x.0].value;
                    let cols = xv.cols();
                    let mut gx = Tensor::zeros_like(xv);
                    for r in 0..xv.rows() {
                        let dst = &mut gx.data_mut()[r * cols + start..r * cols + start + len];
                        dst.copy_from_slice(g.row(r));
                    }
                    accum(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    let cols = g.cols();
                    for &p in parts {
                        let rows = self.nodes[p.0].value.rows();
                        let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        let shape = self.nodes[p.0].value.shape().to_vec();
                        accum(&mut grads, p, Tensor::new(shape, data).unwrap());
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let pcols = self.nodes[p.0].value.cols();
                        let mut data = Vec::with_capacity(rows * pcols);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row(r)[offset..offset + pcols]);
                        }
                        accum(&mut grads, p, Tensor::matrix(rows, pcols, data).unwrap());
                        offset += pcols;
                    }
                }
                Op::CrossEntropy { logits, labels } => {
                    let lv = &self.nodes[logits.0].value;
                    let cols = lv.cols();
                    let rows = lv.rows();
                    let gscale = g.scalar_value() / rows as f64;
                    let mut gl = lv.clone();
                    for r in 0..rows {
                        ops::softmax_row_in_place(&mut gl.data_mut()[r * cols..(r + 1) * cols]);
                        gl.data_mut()[r * cols + labels[r]] -= 1.0;
                    }
                    gl.scale_in_place(gscale);
                    accum(&mut grads, *logits, gl);
                }
                Op::KlDivLogits { target, pred, temp } => {
                    let (p, q) = self.kl_softmaxes(*target, *pred, *temp);
                    let rows = p.rows();
                    let cols = p.cols();
                    let gscale = g.scalar_value() / (rows as f64 * temp);
                    let mut gt = Tensor::zeros_like(&p);
                    let mut gp = Tensor::zeros_like(&p);
                    for r in 0..rows {
                        let pr = p.row(r);
                        let qr = q.row(r);
                        let terms: Vec<f64> = pr
                            .iter()
                            .zip(qr)
                            .map(|(&pv, &qv)| {
                                if pv > 0.0 {
                                    pv.ln() - qv.max(ops::KL_FLOOR).ln()
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let row_kl: f64 =
                            pr.iter().zip(&terms).map(|(&pv, &t)| pv * t).sum();
                        let gtd = &mut gt.data_mut()[r * cols..(r + 1) * cols];
                        let gpd = &mut gp.data_mut()[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            gtd[c] = gscale * pr[c] * (terms[c] - row_kl);
                            gpd[c] = gscale * (qr[c] - pr[c]);
                        }
                    }
                    accum(&mut grads, *target, gt);
                    accum(&mut grads, *pred, gp);
                }
                Op::MsePair(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let gscale = 2.0 * g.scalar_value() / av.len() as f64;
                    let ga = av.zip(bv, |x, y| gscale * (x - y));
                    let gb = ga.map(|v| -v);
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::FakeQuant { w, step } => {
                    let wv = &self.nodes[w.0].value;
                    let s = self.nodes[step.0].value.scalar_value();
                    let mut gw = Tensor::zeros_like(wv);
                    let mut gs = 0.0;
                    for (i, &v) in wv.data().iter().enumerate() {
                        let z = v / s;
                        let gv = g.data()[i];
                        if z.abs() <= QCLIP {
                            gw.data_mut()[i] = gv;
                            gs += gv * (z.round() - z); // LSQ decomposition
                        } else {
                            gs += gv * QCLIP.copysign(z);
                        }
                    }
                    accum(&mut grads, *w, gw);
                    accum(&mut grads, *step, Tensor::scalar(gs));
                }
            }
        }

        let slots = self
            .params
            .iter()
            .map(|&node_idx| {
                grads[node_idx]
                    .take()
                    .map(|t| t.map(round_value))
                    .unwrap_or_else(|| Tensor::zeros_like(&self.nodes[node_idx].value))
            })
            .collect();
        Ok(Gradients { slots })
    }
}

fn accum(grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_loss_gradient_is_2w() {
        // f(w) = mse(w, 0) = w^2 at w = 3 -> gradient 6
        let mut tape = GradTape::new();
        let (w, slot) = tape.param(Tensor::scalar(3.0));
        let zero = tape.constant(Tensor::scalar(0.0));
        let loss = tape.mse_pair(w, zero);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.by_slot(slot).scalar_value(), 6.0);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut tape = GradTape::new();
        let (_, slot) = tape.param(Tensor::scalar(3.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let zero = tape.constant(Tensor::scalar(5.0));
        let loss = tape.mse_pair(c, zero);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.by_slot(slot).scalar_value(), 0.0);
    }

    #[test]
    fn unreachable_param_gets_exact_zeros() {
        let mut tape = GradTape::new();
        let (w, ws) = tape.param(Tensor::scalar(3.0));
        let (_, other) = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let zero = tape.constant(Tensor::scalar(0.0));
        let loss = tape.mse_pair(w, zero);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.by_slot(ws).scalar_value(), 6.0);
        assert_eq!(grads.by_slot(other).data(), &[0.0, 0.0]);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let tape = GradTape::new();
        assert!(matches!(
            tape.backward(NodeId(7)),
            Err(NumericsError::StaleTape(7))
        ));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = GradTape::new();
        let (w, _) = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(w),
            Err(NumericsError::NonScalarLoss)
        ));
    }

    #[test]
    fn matmul_chain_gradient_matches_hand_derivation() {
        // loss = mean((A x - y)^2), single row: closed form gradient.
        let mut tape = GradTape::new();
        let (a, slot) = tape.param(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let x = tape.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let y = tape.constant(Tensor::matrix(1, 1, vec![5.0]).unwrap());
        let pred = tape.matmul(a, x); // [11]
        let loss = tape.mse_pair(pred, y); // (11-5)^2 = 36
        assert_eq!(tape.value(loss).scalar_value(), 36.0);
        let grads = tape.backward(loss).unwrap();
        // d/dA = 2*(Ax - y) * x^T = 2*6*[3,4] = [36,48]
        assert_eq!(grads.by_slot(slot).data(), &[36.0, 48.0]);
    }

    #[test]
    fn fake_quant_value_and_ste_gradient() {
        let mut tape = GradTape::new();
        let (w, wslot) = tape.param(Tensor::vector(vec![0.26, 20.0]));
        let (s, _) = tape.param(Tensor::scalar(0.1));
        let q = tape.fake_quant(w, s);
        let v = tape.value(q).data().to_vec();
        assert!((v[0] - 0.3).abs() < 1e-12);
        assert!((v[1] - 12.7).abs() < 1e-12);
        let zero = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let loss = tape.mse_pair(q, zero);
        let grads = tape.backward(loss).unwrap();
        let gw = grads.by_slot(wslot);
        assert!(gw.data()[0] != 0.0); // inside the clamp: gradient passes
        assert_eq!(gw.data()[1], 0.0); // clamped: gradient blocked
    }
}
