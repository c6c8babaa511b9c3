//! Central finite-difference gradient oracle.
//!
//! Independent of [`Tape::backward`](crate::Tape::backward): it only
//! evaluates the scalar function at perturbed inputs.

use crate::tensor::Tensor;

/// Central-difference estimate of `d f / d input` for every input tensor.
pub fn finite_difference<F>(f: F, inputs: &[Tensor], h: f64) -> Vec<Tensor>
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = f(&work);
            work[i].data_mut()[j] = orig - h;
            let down = f(&work);
            work[i].data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * h);
        }
        grads.push(Tensor::new(inputs[i].shape().to_vec(), g).expect("same shape"));
    }
    grads
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between two gradient lists.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}
