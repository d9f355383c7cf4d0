use crate::error::{Error, Result};

/// Nearest integer with ties away from zero, optionally after clamping.
pub fn round_rating(prediction: f64, clamp: Option<(f64, f64)>) -> f64 {
    match clamp {
        Some((lo, hi)) => prediction.clamp(lo, hi).round(),
        None => prediction.round(),
    }
}

/// Fraction of predictions whose rounded value equals the integer target.
///
/// `clamp` restricts predictions to `[min, max]` before rounding; with `None`
/// an out-of-range prediction (e.g. 0.2 from an untrained embedding) rounds to
/// a value no rating can take.
pub fn rating_accuracy(
    predictions: &[f64],
    targets: &[i64],
    clamp: Option<(f64, f64)>,
) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::UndefinedMetric("rating accuracy of an empty set"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(targets)
        .filter(|(&p, &t)| round_rating(p, clamp) == t as f64)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Root-mean-square error on raw predictions.
pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::UndefinedMetric("RMSE of an empty set"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let sq: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    Ok((sq / predictions.len() as f64).sqrt())
}
