use serde::{Deserialize, Serialize};

use crate::dataset::Variant;
use crate::error::{Error, Result};
use crate::heatmap::PixelBox;

/// Keeps the activation finite when a patch coincides with a prototype.
pub const SIMILARITY_EPSILON: f64 = 1e-4;

/// Similarity activation of a squared distance: `log((d + 1) / (d + eps))`.
/// Positive and strictly decreasing for `d >= 0`.
pub fn similarity_activation(distance: f64) -> f64 {
    ((distance + 1.0) / (distance + SIMILARITY_EPSILON)).ln()
}

pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Backbone output for one image: an `height x width` grid of `depth`-dimensional patches,
/// stored row-major with the patch vector contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    image_id: String,
    height: usize,
    width: usize,
    depth: usize,
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        depth: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(Error::Dataset(format!(
                "feature map must be non-empty, got {height}x{width}x{depth}"
            )));
        }
        if values.len() != height * width * depth {
            return Err(Error::DimensionMismatch {
                expected: height * width * depth,
                got: values.len(),
            });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Dataset(format!(
                "feature map has a non-finite value at flat index {bad}"
            )));
        }
        Ok(Self {
            image_id: image_id.into(),
            height,
            width,
            depth,
            values,
        })
    }

    /// Builds a map from one patch vector per cell, row-major.
    pub fn from_patches(image_id: impl Into<String>, height: usize, width: usize, patches: &[Vec<f32>]) -> Result<Self> {
        let depth = patches.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = patches.iter().find(|p| p.len() != depth) {
            return Err(Error::DimensionMismatch {
                expected: depth,
                got: bad.len(),
            });
        }
        Self::new(image_id, height, width, depth, patches.concat())
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn patch(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.depth;
        &self.values[start..start + self.depth]
    }

    /// Patches with their `(row, col)` position, row-major.
    pub fn patches(&self) -> impl Iterator<Item = ((usize, usize), &[f32])> {
        let w = self.width;
        self.values
            .chunks_exact(self.depth)
            .enumerate()
            .map(move |(i, p)| ((i / w, i % w), p))
    }
}

/// Where a prototype was projected from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSource {
    pub image_id: String,
    pub variant: Variant,
    pub row: usize,
    pub col: usize,
    pub distance_at_projection: f64,
    /// High-similarity region on the (resized, augmented) source image.
    pub bbox: PixelBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub prototype_id: usize,
    pub class_id: usize,
    pub vector: Vec<f32>,
    pub source: Option<PrototypeSource>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityResult {
    pub height: usize,
    pub width: usize,
    /// Squared distance per location, row-major.
    pub distances: Vec<f64>,
    /// Activation per location, row-major.
    pub map: Vec<f64>,
    pub score: f64,
    /// Location of the first maximal activation.
    pub best: (usize, usize),
}

pub fn similarity(feature_map: &FeatureMap, prototype: &[f32]) -> Result<SimilarityResult> {
    if feature_map.depth() != prototype.len() {
        return Err(Error::DimensionMismatch {
            expected: feature_map.depth(),
            got: prototype.len(),
        });
    }
    let distances: Vec<f64> = feature_map
        .patches()
        .map(|(_, z)| squared_distance(z, prototype))
        .collect();
    let map: Vec<f64> = distances.iter().map(|&d| similarity_activation(d)).collect();
    let best = crate::heatmap::argmax(&map);
    Ok(SimilarityResult {
        height: feature_map.height(),
        width: feature_map.width(),
        score: map[best],
        best: (best / feature_map.width(), best % feature_map.width()),
        distances,
        map,
    })
}

/// Per-prototype similarity scores of one feature map.
pub fn similarity_scores(feature_map: &FeatureMap, prototypes: &[Prototype]) -> Result<Vec<f64>> {
    prototypes
        .iter()
        .map(|p| similarity(feature_map, &p.vector).map(|s| s.score))
        .collect()
}

/// Evidence-layer product: `logits[c] = sum_j weights[c][j] * scores[j]`.
pub fn logits_from_scores(weights: &[Vec<f32>], scores: &[f64]) -> Result<Vec<f64>> {
    weights
        .iter()
        .map(|row| {
            if row.len() != scores.len() {
                return Err(Error::DimensionMismatch {
                    expected: scores.len(),
                    got: row.len(),
                });
            }
            Ok(row.iter().zip(scores).map(|(&w, &s)| w as f64 * s).sum())
        })
        .collect()
}
