//! Finite-difference validation of reverse-mode gradients.

use super::{Tensor, TensorError};

/// Compare analytic gradients of a scalar loss against central differences.
///
/// `f` must rebuild the loss from the current contents of `params` on every
/// call. Returns the largest relative error over all parameter coordinates,
/// where relative error is `|analytic - numeric| / max(1, |analytic|,
/// |numeric|)`. Parameters enter with gradients cleared and leave with
/// their original values and cleared gradients.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[Tensor],
    epsilon: f64,
) -> Result<f64, TensorError>
where
    F: FnMut() -> Result<Tensor, TensorError>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    for p in params {
        p.zero_grad();
    }

    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for c in 0..p.numel() {
            let orig = p.get_elem(c);
            p.set_elem(c, orig + epsilon);
            let plus = f()?.value();
            p.set_elem(c, orig - epsilon);
            let minus = f()?.value();
            p.set_elem(c, orig);
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[pi][c];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
