use super::Tensor;
use crate::error::{Error, Result};

/// Central finite-difference gradient of a scalar function:
/// `(f(x + eps·e_j) - f(x - eps·e_j)) / (2·eps)` for every coordinate `j`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, eps: f64) -> Result<Tensor> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for j in 0..x.numel() {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[j] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[j] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                op: format!("finite difference at coordinate {j}"),
            });
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero pairs from
/// blowing up the ratio.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
