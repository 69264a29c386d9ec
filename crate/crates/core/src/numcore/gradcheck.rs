use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `theta`, one coordinate at a time.
pub fn finite_difference_gradient<F>(mut f: F, theta: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    let coords: Vec<usize> = (0..theta.numel()).collect();
    let values = finite_difference_at(&mut f, theta, h, &coords)?;
    Ok(Tensor::from_parts(theta.shape().to_vec(), values))
}

/// Central differences restricted to the listed coordinates.
pub fn finite_difference_at<F>(f: &mut F, theta: &Tensor, h: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidTensor(format!("step size must be positive, got {h}")));
    }
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let x = theta.data()[i];
        let plus = f(&theta.with_element(i, x + h));
        let minus = f(&theta.with_element(i, x - h));
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective evaluated to {plus} / {minus} around coordinate {i}"
            )));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `|a − b| / max(|a|, |b|, floor)`.
///
/// The floor keeps coordinates whose true gradient is numerically zero from
/// dominating the report with pure round-off.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}
