//! Box arithmetic.

use crate::error::{Error, Result};
use crate::types::BBox;

/// Intersection over union of two boxes. Zero-area boxes score 0 against
/// everything, including themselves.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Confidence-weighted mean of each box coordinate.
pub fn weighted_box_fusion(members: &[(BBox, f64)]) -> Result<BBox> {
    if members.is_empty() {
        return Err(Error::Empty("box fusion needs at least one member"));
    }
    let total: f64 = members.iter().map(|(_, s)| *s).sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::ZeroWeights);
    }
    let mut acc = [0.0f64; 4];
    for (b, s) in members {
        for (a, c) in acc.iter_mut().zip(b.to_array()) {
            *a += s * c;
        }
    }
    let mut fused = acc.map(|v| v / total);
    // Rounding can push a coordinate a hair outside the member envelope.
    for (k, v) in fused.iter_mut().enumerate() {
        let lo = members.iter().map(|(b, _)| b.to_array()[k]).fold(f64::INFINITY, f64::min);
        let hi = members.iter().map(|(b, _)| b.to_array()[k]).fold(f64::NEG_INFINITY, f64::max);
        *v = v.clamp(lo, hi);
    }
    Ok(BBox::from_array(fused))
}
