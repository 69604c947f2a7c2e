//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Graphs are built define-by-run: a closure records operations on a fresh
//! [`Tape`] each time it is evaluated, and [`Tape::backward`] sweeps the
//! recorded nodes in reverse creation order. Elementwise binary ops broadcast
//! only over a leading batch axis.

mod tape;
mod tensor;

pub use tape::{sigmoid, softplus, Bound, ParamSet, Tape, Var};
pub use tensor::Tensor;

use crate::error::{contract, Result};

/// Evaluates `graph` with every binding registered as a parameter leaf.
pub fn evaluate<G>(graph: G, bindings: &ParamSet) -> Result<Tensor>
where
    G: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(bindings);
    let out = graph(&mut tape, &bound)?;
    Ok(tape.value(out).clone())
}

/// Scalar loss and its gradient with respect to every binding.
pub fn value_and_grad<G>(graph: G, bindings: &ParamSet) -> Result<(f64, ParamSet)>
where
    G: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(bindings);
    let out = graph(&mut tape, &bound)?;
    let grads = tape.backward(out)?;
    Ok((tape.scalar(out), grads))
}

/// Worst relative disagreement between [`Tape::backward`] and central finite
/// differences over every entry of every binding. The denominator is
/// `max(|g|, 1e-8)` with `g` the analytic gradient, so a graph whose
/// gradients are all zero scores 0.
pub fn finite_diff_check<G>(graph: G, bindings: &ParamSet, step: f64) -> Result<f64>
where
    G: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(contract("finite-difference step must be positive"));
    }
    let (_, grads) = value_and_grad(&graph, bindings)?;
    let scalar = |params: &ParamSet| -> Result<f64> {
        let out = evaluate(&graph, params)?;
        out.item()
            .ok_or_else(|| contract("finite-difference check needs a scalar graph"))
    };
    let mut perturbed = bindings.clone();
    let mut worst: f64 = 0.0;
    for (name, tensor) in bindings {
        let analytic = &grads[name];
        for i in 0..tensor.numel() {
            let orig = tensor.data()[i];
            perturbed.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let plus = scalar(&perturbed)?;
            perturbed.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let minus = scalar(&perturbed)?;
            perturbed.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let g = analytic.data()[i];
            let err = (g - numeric).abs() / g.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
