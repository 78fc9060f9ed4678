//! Central finite-difference oracles used to verify analytic gradients.
//!
//! Verification only — nothing in a training path calls into this module.

use crate::tensor::{ParameterSet, Tensor};

pub const DEFAULT_H: f64 = 1e-5;

/// Central difference of a scalar function over every parameter coordinate.
pub fn fd_param_gradients<F>(params: &ParameterSet, h: f64, mut f: F) -> ParameterSet
where
    F: FnMut(&ParameterSet) -> f64,
{
    let mut grads = params.zeros_like();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name).unwrap().len();
        for i in 0..n {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= h;
            grads.get_mut(&name).unwrap().data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
    }
    grads
}

/// Central difference over every input coordinate.
pub fn fd_input_gradient<F>(input: &Tensor, h: f64, mut f: F) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut grad = Tensor::zeros(input.shape().to_vec());
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    grad
}

/// Worst relative error between analytic and reference gradients.
/// Relative to max(|a|, |b|, floor) per coordinate.
pub fn max_rel_error(analytic: &ParameterSet, reference: &ParameterSet, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, a) in analytic.iter() {
        let r = reference.get(name).expect("matching gradient entry");
        for (&x, &y) in a.data().iter().zip(r.data()) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

pub fn max_rel_error_tensor(analytic: &Tensor, reference: &Tensor, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (&x, &y) in analytic.data().iter().zip(reference.data()) {
        let denom = x.abs().max(y.abs()).max(floor);
        worst = worst.max((x - y).abs() / denom);
    }
    worst
}
