//! Similarity-map geometry: bilinear upsampling to pixel resolution and
//! threshold bounding boxes.

use serde::{Deserialize, Serialize};

/// Fraction of the maximum activation a pixel must reach to be inside the box.
pub const DEFAULT_THRESHOLD_FRACTION: f64 = 0.95;

/// Pixel rectangle, half-open: rows `row0..row1`, columns `col0..col1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl PixelBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            row0: 0,
            col0: 0,
            row1: height,
            col1: width,
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }

    pub fn contains_box(&self, other: &PixelBox) -> bool {
        self.row0 <= other.row0
            && self.col0 <= other.col0
            && self.row1 >= other.row1
            && self.col1 >= other.col1
    }

    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }

    /// Centre in continuous pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.row0 + self.row1) as f64 / 2.0,
            (self.col0 + self.col1) as f64 / 2.0,
        )
    }
}

/// Bilinear resize of a row-major `h x w` grid to `out_h x out_w`, sampling at
/// pixel centres (`src = (dst + 0.5) * in / out - 0.5`) with edge clamping.
pub fn upsample_bilinear(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(map.len(), h * w, "map size does not match {h}x{w}");
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = axis(h, out_h);
    let cols = axis(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = map[r0 * w + c0] * (1.0 - fc) + map[r0 * w + c1] * fc;
            let bottom = map[r1 * w + c0] * (1.0 - fc) + map[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Index of the first maximum in row-major order.
pub fn argmax(map: &[f64]) -> usize {
    map.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Smallest rectangle holding every pixel with value `>= fraction * max`.
/// For a non-positive maximum only the pixels equal to the maximum qualify.
pub fn threshold_bbox(map: &[f64], h: usize, w: usize, fraction: f64) -> PixelBox {
    assert_eq!(map.len(), h * w, "map size does not match {h}x{w}");
    let max = map[argmax(map)];
    let threshold = if max > 0.0 { fraction * max } else { max };
    let mut bbox = PixelBox {
        row0: h,
        col0: w,
        row1: 0,
        col1: 0,
    };
    for r in 0..h {
        for c in 0..w {
            if map[r * w + c] >= threshold {
                bbox.row0 = bbox.row0.min(r);
                bbox.col0 = bbox.col0.min(c);
                bbox.row1 = bbox.row1.max(r + 1);
                bbox.col1 = bbox.col1.max(c + 1);
            }
        }
    }
    bbox
}

/// Rescales values to `[0, 1]` (for rendering only). A constant map becomes all ones.
pub fn normalize_unit(map: &[f64]) -> Vec<f64> {
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if span <= 0.0 || !span.is_finite() {
        return vec![1.0; map.len()];
    }
    map.iter().map(|v| (v - lo) / span).collect()
}
