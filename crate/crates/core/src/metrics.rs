//! Trajectory error against ground truth.

use crate::model::KeyframeState;

/// Absolute trajectory error: RMS keyframe position error, matched by id.
/// Estimates and truth share the global frame, so no alignment is applied.
/// Keyframes missing from the truth are ignored; an empty match gives NaN.
pub fn ate(estimates: &[KeyframeState], truth: &[KeyframeState]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for est in estimates {
        if let Some(t) = truth.iter().find(|t| t.id == est.id) {
            sum += (est.p - t.p).norm_squared();
            count += 1;
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        (sum / count as f64).sqrt()
    }
}
