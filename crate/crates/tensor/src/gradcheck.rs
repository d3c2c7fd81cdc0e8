//! Central finite-difference gradient checks.
//!
//! The checker only evaluates the forward pass; it never looks at the
//! gradients the tape produces except to compare against them.

use crate::{NodeId, Tape, Tensor, TensorError};

/// Builds a scalar loss from trainable leaves registered for `inputs`.
pub trait LossFn: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError> {}
impl<F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>> LossFn for F {}

fn eval(f: &impl LossFn, inputs: &[Tensor]) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    tape.value(loss)?.item()
}

/// Analytic gradients from the tape, one per input (zeros where unreached).
pub fn analytic(f: &impl LossFn, inputs: &[Tensor]) -> Result<Vec<Tensor>, TensorError> {
    let mut tape = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    let mut grads = tape.backward(loss)?;
    Ok(ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Central-difference gradients with step `h`.
pub fn numeric(f: &impl LossFn, inputs: &[Tensor], h: f64) -> Result<Vec<Tensor>, TensorError> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[t].shape());
        for k in 0..inputs[t].numel() {
            let orig = work[t].data()[k];
            work[t].data_mut()[k] = orig + h;
            let plus = eval(f, &work)?;
            work[t].data_mut()[k] = orig - h;
            let minus = eval(f, &work)?;
            work[t].data_mut()[k] = orig;
            grad.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, floor)` over all inputs jointly.
pub fn relative_error(a: &[Tensor], n: &[Tensor], floor: f64) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (ta, tn) in a.iter().zip(n) {
        for (&x, &y) in ta.data().iter().zip(tn.data()) {
            diff += (x - y).powi(2);
            na += x * x;
            nn += y * y;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(floor)
}

/// Largest relative error between tape and finite-difference gradients.
pub fn check(f: &impl LossFn, inputs: &[Tensor], h: f64) -> Result<f64, TensorError> {
    let a = analytic(f, inputs)?;
    let n = numeric(f, inputs, h)?;
    Ok(relative_error(&a, &n, 1e-8))
}
