use std::path::Path;

use image::RgbImage;
use protomsl::calibrate::{confidence, Calibrator};
use protomsl::explain::{explain_image, Explanation};
use protomsl::protonet::{load_checkpoint, ProtoNet};
use protomsl::Result;

/// Calibrated prediction for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
    pub confidence: f64,
}

impl Scored {
    pub fn from_probabilities(logits: Vec<f64>, probabilities: Vec<f64>) -> Self {
        let (predicted, confidence) = confidence(&probabilities);
        Self {
            logits,
            probabilities,
            predicted,
            confidence,
        }
    }
}

/// What the service needs from a model. Implementations must be cheap to
/// share across threads; calls may run concurrently.
pub trait Engine: Send + Sync {
    fn model_version(&self) -> &str;
    fn class_names(&self) -> &[String];
    fn num_prototypes(&self) -> usize;
    fn input_size(&self) -> usize;
    fn classify(&self, image: &RgbImage) -> Result<Scored>;
    fn explain(&self, image: &RgbImage, image_id: &str, k: usize) -> Result<Explanation>;
}

/// A loaded checkpoint with its calibrator.
#[derive(Debug)]
pub struct ModelEngine {
    model: ProtoNet,
    calibrator: Calibrator,
    version: String,
}

impl ModelEngine {
    pub fn new(model: ProtoNet, calibrator: Calibrator, version: impl Into<String>) -> Self {
        Self {
            model,
            calibrator,
            version: version.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = load_checkpoint(path, &candle_core::Device::Cpu)?;
        if !ck.model.is_projected() {
            log::warn!("checkpoint prototypes were never projected; explanations will be refused");
        }
        Ok(Self::new(ck.model, ck.calibrator.unwrap_or_default(), ck.version))
    }

    pub fn model(&self) -> &ProtoNet {
        &self.model
    }
}

impl Engine for ModelEngine {
    fn model_version(&self) -> &str {
        &self.version
    }

    fn class_names(&self) -> &[String] {
        self.model.class_names()
    }

    fn num_prototypes(&self) -> usize {
        self.model.num_prototypes()
    }

    fn input_size(&self) -> usize {
        self.model.input_size()
    }

    fn classify(&self, image: &RgbImage) -> Result<Scored> {
        let f = self.model.forward(image)?;
        let logits: Vec<f64> = f.logits.iter().map(|&v| v as f64).collect();
        let probabilities = self.calibrator.apply(&logits)?;
        Ok(Scored::from_probabilities(logits, probabilities))
    }

    fn explain(&self, image: &RgbImage, image_id: &str, k: usize) -> Result<Explanation> {
        explain_image(&self.model, &self.calibrator, image, image_id, k)
    }
}
