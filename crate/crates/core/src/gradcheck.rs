//! Central-difference gradients.
//!
//! Independent oracle for every reverse-mode gradient in the crate: it never
//! touches the tape, only evaluates the function at perturbed points.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function, one probe pair per
/// coordinate: `(f(x + step e_i) - f(x - step e_i)) / (2 step)`.
pub fn finite_diff_gradient<F>(f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    assert!(step > 0.0, "step must be positive");
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteProbe);
        }
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Ok(Tensor::new(x.shape().to_vec(), grad))
}

/// Norm-wise relative disagreement between two gradient tensors,
/// `|a - b| / max(|b|, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / b.l2_norm().max(1e-12)
}
