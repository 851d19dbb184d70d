//! Axis-aligned boxes in normalized `[x1, y1, x2, y2]` form.

pub type BBox = [f64; 4];

pub fn area(b: &BBox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn center(b: &BBox) -> (f64, f64) {
    ((b[0] + b[2]) * 0.5, (b[1] + b[3]) * 0.5)
}

/// Intersection over union; `0.0` when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = area(&[a[0].max(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].min(b[3])]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn contains_point(b: &BBox, x: f64, y: f64) -> bool {
    x >= b[0] && x <= b[2] && y >= b[1] && y <= b[3]
}

/// Grows a box symmetrically so each side spans at least `min_extent`,
/// then shifts it back inside the unit square.
pub fn ensure_min_extent(b: &BBox, min_extent: f64) -> BBox {
    let mut out = *b;
    for (lo, hi) in [(0, 2), (1, 3)] {
        if out[hi] - out[lo] < min_extent {
            let c = (out[lo] + out[hi]) * 0.5;
            out[lo] = c - min_extent * 0.5;
            out[hi] = c + min_extent * 0.5;
        }
        if out[lo] < 0.0 {
            out[hi] -= out[lo];
            out[lo] = 0.0;
        }
        if out[hi] > 1.0 {
            out[lo] -= out[hi] - 1.0;
            out[hi] = 1.0;
        }
        out[lo] = out[lo].max(0.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let a = [0.1, 0.1, 0.5, 0.6];
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[0.6, 0.6, 0.9, 0.9]), 0.0);
        let v = iou(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]);
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn min_extent_growth_stays_inside() {
        let b = ensure_min_extent(&[0.99, 0.5, 0.995, 0.5], 0.125);
        assert!((b[2] - b[0] - 0.125).abs() < 1e-12 && b[2] <= 1.0 && b[0] >= 0.0);
        assert!((b[3] - b[1] - 0.125).abs() < 1e-12);
        let big = [0.1, 0.2, 0.6, 0.9];
        assert_eq!(ensure_min_extent(&big, 0.125), big);
    }
}
