//! Central-finite-difference verification of analytic gradients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

/// Optional per-tensor element subsampling for large parameter sets.
#[derive(Debug, Clone, Copy)]
pub struct SamplePlan {
    pub per_tensor: usize,
    pub seed: u64,
}

/// Compares `grad_fn`'s analytic gradients against central differences of
/// `loss_fn`, returning the max relative error over all checked elements.
///
/// Relative error uses max(|analytic|, |central|, floor) as denominator, so
/// gradients smaller than `floor` are compared absolutely at the same
/// tolerance.
pub fn finite_diff_check<L, G>(
    mut loss_fn: L,
    mut grad_fn: G,
    params: &[Tensor],
    epsilon: f64,
    floor: f64,
    sample: Option<SamplePlan>,
) -> f64
where
    L: FnMut(&[Tensor]) -> f64,
    G: FnMut(&[Tensor]) -> Vec<Tensor>,
{
    assert!(epsilon > 0.0 && floor > 0.0);
    let analytic = grad_fn(params);
    assert_eq!(analytic.len(), params.len());

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    for t in 0..params.len() {
        let n = params[t].len();
        let indices: Vec<usize> = match sample {
            Some(plan) if plan.per_tensor < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(plan.seed.wrapping_add(t as u64));
                (0..plan.per_tensor).map(|_| rng.gen_range(0..n)).collect()
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + epsilon;
            let plus = loss_fn(&work);
            work[t].data_mut()[i] = orig - epsilon;
            let minus = loss_fn(&work);
            work[t].data_mut()[i] = orig;
            let central = (plus - minus) / (2.0 * epsilon);
            let a = analytic[t].data()[i];
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(floor);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::GradTape;

    #[test]
    fn quadratic_loss_is_near_exact() {
        // loss = sum w_i^2; central differences are exact for polynomials of degree 2
        let params = vec![Tensor::vector(vec![1.0, -2.0, 3.5])];
        let loss = |p: &[Tensor]| p[0].data().iter().map(|v| v * v).sum::<f64>();
        let grad = |p: &[Tensor]| vec![p[0].map(|v| 2.0 * v)];
        let err = finite_diff_check(loss, grad, &params, 1e-4, 1e-8, None);
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn tape_gradients_match_finite_differences() {
        // small composite: loss = mse(tanh(w A), y)
        let a = Tensor::matrix(3, 2, vec![0.3, -0.1, 0.5, 0.2, -0.4, 0.7]).unwrap();
        let y = Tensor::matrix(1, 2, vec![0.2, -0.3]).unwrap();
        let params = vec![Tensor::matrix(1, 3, vec![0.1, -0.2, 0.3]).unwrap()];
        let run = |p: &[Tensor]| {
            let mut tape = GradTape::new();
            let (w, slot) = tape.param(p[0].clone());
            let ac = tape.constant(a.clone());
            let yc = tape.constant(y.clone());
            let h = tape.matmul(w, ac);
            let t = tape.tanh(h);
            let loss = tape.mse_pair(t, yc);
            (tape, loss, slot)
        };
        let loss_fn = |p: &[Tensor]| {
            let (tape, loss, _) = run(p);
            tape.value(loss).scalar_value()
        };
        let grad_fn = |p: &[Tensor]| {
            let (tape, loss, slot) = run(p);
            vec![tape.backward(loss).unwrap().by_slot(slot).clone()]
        };
        let err = finite_diff_check(loss_fn, grad_fn, &params, 1e-5, 1e-8, None);
        assert!(err < 1e-7, "relative error {err}");
    }
}
