//! Public request and response bodies.
//!
//! A withheld (abstained) prediction never carries a class: the class fields
//! and the confidence are omitted and `abstained` is `true`.

use protomsl::dataset::{Instrument, Split, Variant};
use protomsl::explain::Explanation;
use protomsl::heatmap::PixelBox;
use serde::{Deserialize, Serialize};

use crate::engine::Scored;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub image_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub abstained: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl Prediction {
    /// Applies the inclusive gate `confidence >= threshold`.
    pub fn gate(scored: &Scored, class_names: &[String], threshold: f64) -> Self {
        if scored.confidence >= threshold {
            Self {
                abstained: false,
                class_id: Some(scored.predicted),
                class_name: class_names.get(scored.predicted).cloned(),
                confidence: Some(scored.confidence),
            }
        } else {
            Self {
                abstained: true,
                class_id: None,
                class_name: None,
                confidence: None,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub model_version: String,
    pub threshold: f64,
    #[serde(flatten)]
    pub prediction: Prediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub image_id: String,
    pub instrument: Instrument,
    pub sol: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    pub prediction: Prediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagesResponse {
    pub model_version: String,
    pub total: usize,
    pub offset: usize,
    pub items: Vec<ImageSummary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImagesQuery {
    /// Predicted class name.
    pub class: Option<String>,
    pub min_confidence: Option<f64>,
    pub max_confidence: Option<f64>,
    #[serde(default)]
    pub include_abstained: bool,
    pub split: Option<Split>,
    #[serde(default)]
    pub offset: usize,
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceCard {
    pub prototype_id: usize,
    pub prototype_class: usize,
    pub prototype_class_name: String,
    pub similarity_score: f64,
    /// Evidence-layer weight to the predicted class; omitted when the prediction is withheld.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fc_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negative_evidence: Option<bool>,
    pub test_bbox: PixelBox,
    pub source_image_id: String,
    pub source_variant: Variant,
    pub source_bbox: PixelBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainResponse {
    pub image_id: String,
    pub model_version: String,
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub image_size: usize,
    #[serde(flatten)]
    pub prediction: Prediction,
    pub items: Vec<EvidenceCard>,
}

impl ExplainResponse {
    pub fn new(e: &Explanation, model_version: &str, class_names: &[String], threshold: f64) -> Self {
        let delivered = e.confidence >= threshold;
        let prediction = if delivered {
            Prediction {
                abstained: false,
                class_id: Some(e.predicted_class),
                class_name: class_names.get(e.predicted_class).cloned(),
                confidence: Some(e.confidence),
            }
        } else {
            Prediction {
                abstained: true,
                class_id: None,
                class_name: None,
                confidence: None,
            }
        };
        let items = e
            .items
            .iter()
            .map(|i| EvidenceCard {
                prototype_id: i.prototype_id,
                prototype_class: i.prototype_class,
                prototype_class_name: class_names.get(i.prototype_class).cloned().unwrap_or_default(),
                similarity_score: i.similarity_score,
                fc_weight: delivered.then_some(i.fc_weight_to_predicted),
                negative_evidence: delivered.then_some(i.negative_evidence),
                test_bbox: i.test_bbox,
                source_image_id: i.source_image_id.clone(),
                source_variant: i.source_variant,
                source_bbox: i.source_bbox,
            })
            .collect();
        Self {
            image_id: e.image_id.clone(),
            model_version: model_version.to_string(),
            k: e.k,
            warning: e.warning.clone(),
            image_size: e.image_size,
            prediction,
            items,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub image_id: String,
    pub kind: String,
    pub suggested_label: Option<usize>,
    pub prototype_id: Option<usize>,
    pub comment: Option<String>,
    /// Version the client saw; a mismatch with the served model is rejected.
    pub model_version: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_version: String,
    pub classes: Vec<String>,
    pub prototypes: usize,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportQuery {
    pub model_version: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainQuery {
    pub k: Option<usize>,
}
