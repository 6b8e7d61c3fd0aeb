use crate::error::{shape_err, Result};

/// Soft IoU of two mask volumes: `Σ min(a, b) / Σ max(a, b)` over all frames
/// and pixels, 0 when both are empty.
pub fn volumetric_soft_iou(a: &[&[f64]], b: &[&[f64]]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err(format!("{} frames vs {} frames", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0.0, 0.0);
    for (fa, fb) in a.iter().zip(b) {
        if fa.len() != fb.len() {
            return Err(shape_err(format!("mask of {} pixels vs {}", fa.len(), fb.len())));
        }
        for (&x, &y) in fa.iter().zip(fb.iter()) {
            inter += x.min(y);
            union += x.max(y);
        }
    }
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}
