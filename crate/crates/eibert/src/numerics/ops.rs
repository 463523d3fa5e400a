//! Differentiable-loss primitives shared by all stages, in their pure
//! (non-tape) form. The tape reuses these internals so both routes agree.

use super::precision::round_value;
use super::tensor::Tensor;
use super::NumericsError;

/// Floor applied to the target side of a log before dividing; keeps ln finite.
pub const KL_FLOOR: f64 = 1e-12;

/// In-place stabilized softmax over one row.
pub(crate) fn softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor, NumericsError> {
    if logits.cols() == 0 || logits.shape().len() > 2 {
        return Err(NumericsError::InvalidShape(format!(
            "softmax_rows expects a non-empty 1-D or 2-D tensor, got {:?}",
            logits.shape()
        )));
    }
    if !logits.all_finite() {
        return Err(NumericsError::NonFinite("softmax_rows input".into()));
    }
    let mut out = logits.clone();
    let cols = out.cols();
    for r in 0..out.rows() {
        softmax_row_in_place(&mut out.data_mut()[r * cols..(r + 1) * cols]);
    }
    Ok(out.finalized())
}

/// Mean over rows of sum_j p_j * ln(p_j / q_j); q floored at `KL_FLOOR`,
/// p_j = 0 terms contribute zero.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64, NumericsError> {
    if p.shape() != q.shape() {
        return Err(NumericsError::InvalidShape(format!(
            "kl_divergence shapes differ: {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    let cols = p.cols();
    let rows = p.rows();
    let mut total = 0.0;
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            let pv = p.at(r, c);
            if pv > 0.0 {
                let qv = q.at(r, c).max(KL_FLOOR);
                acc += pv * (pv.ln() - qv.ln());
            }
        }
        total += acc;
    }
    Ok(round_value(total / rows as f64))
}

/// Mean over all elements of (a - b)^2.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64, NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::InvalidShape(format!(
            "mse shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.len() as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(round_value(sum / n))
}

/// Mean over rows of -ln(softmax(logits)[label]).
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64, NumericsError> {
    let classes = logits.cols();
    let rows = logits.rows();
    if labels.len() != rows {
        return Err(NumericsError::InvalidShape(format!(
            "{} labels for {} rows",
            labels.len(),
            rows
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(NumericsError::InvalidLabel { label: bad, classes });
    }
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(round_value(total / rows as f64))
}

/// tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}
