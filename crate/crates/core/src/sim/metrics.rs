use crate::error::{Error, Result};

/// Latest value minus the best (lowest) strictly earlier value.
///
/// Metrics are lower-is-better, so a positive result means the latest model
/// got worse on this test set than some earlier model was.
pub fn forgetting_factor(history: &[f64]) -> Result<f64> {
    match history.split_last() {
        Some((latest, earlier)) if !earlier.is_empty() => {
            let best = earlier.iter().copied().fold(f64::INFINITY, f64::min);
            Ok(latest - best)
        }
        _ => Err(Error::InvalidArgument(format!(
            "forgetting needs at least 2 evaluations, got {}",
            history.len()
        ))),
    }
}

/// Relative change of `experimental` against `baseline`.
pub fn rcp(experimental: f64, baseline: f64) -> Result<f64> {
    if baseline.is_nan() || baseline <= 0.0 {
        return Err(Error::InvalidArgument(format!("baseline metric must be positive, got {baseline}")));
    }
    Ok((experimental - baseline) / baseline)
}
