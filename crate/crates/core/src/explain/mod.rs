//! Evidence explanations: the top-k prototype matches for an image with their
//! similarity maps, high-similarity boxes, and the evidence-layer weights that
//! turn them into a class score.

mod panel;

pub use panel::{jet, render_panel, PanelOptions, BORDER, BAR_HEIGHT};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::calibrate::{confidence, Calibrator};
use crate::dataset::Variant;
use crate::error::{Error, Result};
use crate::heatmap::{argmax, threshold_bbox, upsample_bilinear, PixelBox, DEFAULT_THRESHOLD_FRACTION};
use crate::protonet::{similarity, FeatureMap, Prototype, ProtoNet};

pub const DEFAULT_K: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub prototype_id: usize,
    pub prototype_class: usize,
    pub similarity_score: f64,
    pub fc_weight_to_predicted: f64,
    /// Set when the weight to the predicted class is negative.
    pub negative_evidence: bool,
    pub test_bbox: PixelBox,
    /// Best-matching feature cell `(row, col)`.
    pub test_location: (usize, usize),
    pub source_image_id: String,
    pub source_variant: Variant,
    pub source_bbox: PixelBox,
    /// Activation map at image resolution, row-major.
    #[serde(skip)]
    pub heatmap: Vec<f64>,
    /// Activation map at feature resolution, row-major.
    #[serde(skip)]
    pub native_map: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub image_id: String,
    pub predicted_class: usize,
    pub confidence: f64,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub image_size: usize,
    pub items: Vec<EvidenceItem>,
}

/// Inputs shared by every explanation of one model.
#[derive(Clone, Copy, Debug)]
pub struct ExplainParams<'a> {
    pub prototypes: &'a [Prototype],
    pub fc: &'a [Vec<f32>],
    pub image_size: usize,
    pub fraction: f64,
}

/// Builds the explanation of one feature map. `k` larger than the number of
/// prototypes is clamped, with a warning recorded on the result.
pub fn explain_feature_map(
    fm: &FeatureMap,
    params: &ExplainParams<'_>,
    predicted_class: usize,
    confidence: f64,
    k: usize,
) -> Result<Explanation> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if predicted_class >= params.fc.len() {
        return Err(Error::LabelOutOfRange { label: predicted_class, classes: params.fc.len() });
    }
    let p = params.prototypes.len();
    if params.prototypes.iter().any(|pr| pr.source.is_none()) {
        return Err(Error::NotProjected);
    }
    let mut scored: Vec<(usize, crate::protonet::SimilarityResult)> = params
        .prototypes
        .iter()
        .map(|pr| similarity(fm, &pr.vector).map(|s| (pr.prototype_id, s)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    let take = k.min(p);
    let warning = (k > p).then(|| format!("k = {k} exceeds the {p} prototypes; clamped to {p}"));
    let size = params.image_size;
    let items = scored
        .into_iter()
        .take(take)
        .map(|(id, sim)| {
            let proto = &params.prototypes[id];
            let source = proto.source.as_ref().expect("checked above");
            let heatmap = upsample_bilinear(&sim.map, sim.height, sim.width, size, size);
            let test_bbox = threshold_bbox(&heatmap, size, size, params.fraction);
            let weight = params.fc[predicted_class][id] as f64;
            EvidenceItem {
                prototype_id: id,
                prototype_class: proto.class_id,
                similarity_score: sim.score,
                fc_weight_to_predicted: weight,
                negative_evidence: weight < 0.0,
                test_bbox,
                test_location: sim.best,
                source_image_id: source.image_id.clone(),
                source_variant: source.variant,
                source_bbox: source.bbox,
                heatmap,
                native_map: sim.map,
            }
        })
        .collect();
    Ok(Explanation {
        image_id: fm.image_id().to_string(),
        predicted_class,
        confidence,
        k: take,
        warning,
        image_size: size,
        items,
    })
}

/// Classifies `image` and explains the (calibrated) prediction.
pub fn explain_image(
    model: &ProtoNet,
    calibrator: &Calibrator,
    image: &RgbImage,
    image_id: &str,
    k: usize,
) -> Result<Explanation> {
    let fm = model.extract_features(image, image_id)?;
    let forward = model.forward(image)?;
    let logits: Vec<f64> = forward.logits.iter().map(|&v| v as f64).collect();
    let (pred, conf) = confidence(&calibrator.apply(&logits)?);
    let prototypes = model.prototypes()?;
    let fc = model.last_layer()?;
    let params = ExplainParams {
        prototypes: &prototypes,
        fc: &fc,
        image_size: model.input_size(),
        fraction: DEFAULT_THRESHOLD_FRACTION,
    };
    explain_feature_map(&fm, &params, pred, conf, k)
}

/// Position of the maximal pixel of an item's heatmap.
pub fn heatmap_argmax(item: &EvidenceItem, image_size: usize) -> (usize, usize) {
    let i = argmax(&item.heatmap);
    (i / image_size, i % image_size)
}
