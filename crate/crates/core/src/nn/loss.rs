use crate::error::{Error, Result};

/// Mean absolute percentage error and its gradient w.r.t. `pred`.
///
/// `loss = mean(|A - F| / |A|)` with `A = target`, `F = pred`; the
/// subgradient at `A == F` is 0.
pub fn mape_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "MAPE needs equal nonempty lengths (pred {}, target {})",
            pred.len(),
            target.len()
        )));
    }
    if target.iter().any(|a| a.abs() <= 1e-12) {
        return Err(Error::ZeroTarget);
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&f, &a)| {
            loss += (a - f).abs() / a.abs();
            let diff = a - f;
            if diff == 0.0 {
                0.0
            } else {
                -diff.signum() / (n * a.abs())
            }
        })
        .collect();
    Ok((loss / n, grad))
}
