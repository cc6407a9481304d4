//! Training objective: cross-entropy plus cluster, separation and diversity costs.
//!
//! All terms are computed from the `B x P` matrix of nearest-patch squared
//! distances (`min over patches of ||z - p_j||^2`), so they work for any dtype
//! and stay differentiable with respect to prototypes and everything upstream.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protonet::ForwardOutput;

/// Stand-in for "no candidate" when taking masked minima.
const MASK_FILL: f64 = 1e30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.8,
            lambda2: 0.08,
            lambda3: 0.04,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.margin];
        if all.iter().any(|v| !v.is_finite()) || self.margin < 0.0 {
            return Err(Error::Config(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub crsent: f64,
    pub clst: f64,
    pub sep: f64,
    pub div: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.crsent, self.clst, self.sep, self.div]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Weighted mean of several breakdowns (weights are batch sizes).
    pub fn weighted_mean(parts: &[(LossBreakdown, usize)]) -> LossBreakdown {
        let n: usize = parts.iter().map(|(_, w)| w).sum();
        if n == 0 {
            return LossBreakdown::default();
        }
        let mut out = LossBreakdown::default();
        for (b, w) in parts {
            let w = *w as f64 / n as f64;
            out.total += w * b.total;
            out.crsent += w * b.crsent;
            out.clst += w * b.clst;
            out.sep += w * b.sep;
            out.div += w * b.div;
        }
        out
    }
}

/// `B x P` indicator (in the given dtype) of prototypes owned by each image's class.
/// Checks that every label is in range and has both in-class and out-of-class prototypes.
pub fn class_mask(
    labels: &[u32],
    prototype_class: &[usize],
    num_classes: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::Loss("empty batch".into()));
    }
    let p = prototype_class.len();
    let mut mask = Vec::with_capacity(labels.len() * p);
    for &y in labels {
        let y = y as usize;
        if y >= num_classes {
            return Err(Error::LabelOutOfRange { label: y, classes: num_classes });
        }
        let before = mask.len();
        mask.extend(prototype_class.iter().map(|&c| if c == y { 1.0f64 } else { 0.0 }));
        let inside = mask[before..].iter().filter(|&&v| v > 0.0).count();
        if inside == 0 {
            return Err(Error::Loss(format!("class {y} has no prototypes")));
        }
        if inside == p {
            return Err(Error::Loss(format!(
                "class {y} has no out-of-class prototypes; separation is undefined"
            )));
        }
    }
    Ok(Tensor::from_vec(mask, (labels.len(), p), device)?.to_dtype(dtype)?)
}

fn to_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean negative log-likelihood of `softmax(logits)` at the labels.
pub fn crsent(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if b == 0 || labels.len() != b {
        return Err(Error::Loss(format!("{b} logit rows for {} labels", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y as usize >= c) {
        return Err(Error::LabelOutOfRange { label: y as usize, classes: c });
    }
    let targets = Tensor::new(labels, logits.device())?;
    Ok(candle_nn::loss::cross_entropy(logits, &targets)?)
}

fn masked_min(min_distances: &Tensor, mask: &Tensor) -> Result<Tensor> {
    // outside the mask the value is pushed far above any real distance
    let fill = ((mask.ones_like()? - mask)? * MASK_FILL)?;
    Ok((min_distances + fill)?.min(1)?)
}

/// Cluster cost: mean over images of the smallest in-class nearest-patch distance.
pub fn clst(min_distances: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok(masked_min(min_distances, mask)?.mean_all()?)
}

/// Separation cost: minus the mean over images of the smallest out-of-class distance.
pub fn sep(min_distances: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let out = (mask.ones_like()? - mask)?;
    Ok(masked_min(min_distances, &out)?.mean_all()?.neg()?)
}

/// Diversity cost:
/// `-(1/n) sum_i mean_{j in class(y_i)} min_z max(||z - p_j||^2 - margin, 0)`.
/// The hinge is monotone, so its minimum over patches is the hinge of the nearest-patch distance.
pub fn div(min_distances: &Tensor, mask: &Tensor, margin: f64) -> Result<Tensor> {
    if margin < 0.0 {
        return Err(Error::Loss(format!("margin must be non-negative, got {margin}")));
    }
    let hinge = (min_distances - margin)?.relu()?;
    let per_image = (hinge * mask)?.sum(1)?.div(&mask.sum(1)?)?;
    Ok(per_image.mean_all()?.neg()?)
}

/// Combined objective and its scalar breakdown.
pub fn total_loss(
    logits: &Tensor,
    min_distances: &Tensor,
    labels: &[u32],
    prototype_class: &[usize],
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    let (_, c) = logits.dims2()?;
    let mask = class_mask(labels, prototype_class, c, min_distances.dtype(), min_distances.device())?;
    let ce = crsent(logits, labels)?;
    let cl = clst(min_distances, &mask)?;
    let sp = sep(min_distances, &mask)?;
    let dv = div(min_distances, &mask, weights.margin)?;
    let total = (((&ce + (&cl * weights.lambda1)?)? + (&sp * weights.lambda2)?)? + (&dv * weights.lambda3)?)?;
    let breakdown = LossBreakdown {
        total: to_scalar(&total)?,
        crsent: to_scalar(&ce)?,
        clst: to_scalar(&cl)?,
        sep: to_scalar(&sp)?,
        div: to_scalar(&dv)?,
    };
    Ok((total, breakdown))
}

/// [`total_loss`] on a model forward pass.
pub fn forward_loss(
    out: &ForwardOutput,
    labels: &[u32],
    prototype_class: &[usize],
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    total_loss(&out.logits, &out.min_distances, labels, prototype_class, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        let b = rows.len();
        let p = rows[0].len();
        Tensor::from_vec(rows.concat(), (b, p), &Device::Cpu).unwrap()
    }

    fn s(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    fn mask(labels: &[u32], pc: &[usize], c: usize) -> Tensor {
        class_mask(labels, pc, c, DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn crsent_cases() {
        assert!((s(&crsent(&t(&[&[0.3, 0.3]]), &[1]).unwrap()) - 2f64.ln()).abs() < 1e-12);
        assert!(s(&crsent(&t(&[&[80.0, 0.0]]), &[0]).unwrap()) < 1e-12);
        let expected = -(2f64.exp() / (2f64.exp() + 1f64.exp())).ln();
        assert!((s(&crsent(&t(&[&[2.0, 1.0]]), &[0]).unwrap()) - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);
        assert!(matches!(crsent(&t(&[&[2.0, 1.0]]), &[2]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn clst_and_sep_by_hand() {
        // image of class 0; prototypes (class 0, class 0, class 1)
        let pc = [0, 0, 1];
        let m = mask(&[0], &pc, 2);
        let d = t(&[&[1.0, 3.0, 4.0]]);
        assert_eq!(s(&clst(&d, &m).unwrap()), 1.0);
        assert_eq!(s(&sep(&d, &m).unwrap()), -4.0);
        let zero = t(&[&[0.0, 3.0, 0.0]]);
        assert_eq!(s(&clst(&zero, &m).unwrap()), 0.0);
        assert_eq!(s(&sep(&zero, &m).unwrap()), 0.0);
    }

    #[test]
    fn clst_ignores_out_of_class() {
        let m1 = mask(&[0], &[0, 1], 2);
        let m2 = mask(&[0], &[0, 1, 1], 2);
        let a = clst(&t(&[&[2.0, 9.0]]), &m1).unwrap();
        let b = clst(&t(&[&[2.0, 9.0, 0.0]]), &m2).unwrap();
        assert_eq!(s(&a), s(&b));
    }

    #[test]
    fn div_by_hand() {
        let m = mask(&[0], &[0, 1], 2);
        assert_eq!(s(&div(&t(&[&[1.5, 0.0]]), &m, 1.0).unwrap()), -0.5);
        assert_eq!(s(&div(&t(&[&[1.0, 0.0]]), &m, 1.0).unwrap()), 0.0);
        assert_eq!(s(&div(&t(&[&[0.2, 0.0]]), &m, 1.0).unwrap()), 0.0);
    }

    #[test]
    fn div_margin_shift() {
        // both in-class prototypes beyond the margin: shrinking the margin by delta lowers div by delta
        let m = mask(&[0, 0], &[0, 0, 1], 2);
        let d = t(&[&[3.0, 5.0, 0.0], &[2.5, 4.0, 0.0]]);
        let a = s(&div(&d, &m, 1.0).unwrap());
        let b = s(&div(&d, &m, 0.75).unwrap());
        assert!((a - b - 0.25).abs() < 1e-12);
    }

    #[test]
    fn total_assembles_components() {
        let logits = t(&[&[2.0, 1.0]]);
        let d = t(&[&[1.5, 4.0]]);
        let w = LossWeights::default();
        let (total, b) = total_loss(&logits, &d, &[0], &[0, 1], &w).unwrap();
        let ce = -(2f64.exp() / (2f64.exp() + 1f64.exp())).ln();
        let expected = ce + 0.8 * 1.5 + 0.08 * -4.0 + 0.04 * -0.5;
        assert!((s(&total) - expected).abs() < 1e-12);
        assert!((b.total - b.crsent - 0.8 * b.clst - 0.08 * b.sep - 0.04 * b.div).abs() < 1e-12);
        let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, margin: 1.0 };
        let (_, z) = total_loss(&logits, &d, &[0], &[0, 1], &zero).unwrap();
        assert_eq!(z.total, z.crsent);
        let double = LossWeights { lambda3: 0.08, ..w };
        let (_, bd) = total_loss(&logits, &d, &[0], &[0, 1], &double).unwrap();
        assert!((bd.total - b.total - 0.04 * b.div).abs() < 1e-12);
    }

    #[test]
    fn single_class_has_no_separation() {
        assert!(matches!(
            class_mask(&[0], &[0, 0], 1, DType::F64, &Device::Cpu),
            Err(Error::Loss(_))
        ));
    }

    #[test]
    fn signs() {
        let m = mask(&[0, 1], &[0, 1], 2);
        let d = t(&[&[0.3, 2.0], &[5.0, 1.4]]);
        assert!(s(&clst(&d, &m).unwrap()) >= 0.0);
        assert!(s(&sep(&d, &m).unwrap()) <= 0.0);
        assert!(s(&div(&d, &m, 1.0).unwrap()) <= 0.0);
    }
}
