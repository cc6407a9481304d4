//! Flat run configuration, read from TOML.
//!
//! ```toml
//! backbone = "resnet18"
//! lr_phase1 = 1e-4
//! lambda3 = 0.04
//! margin = 1.0
//! ```
//!
//! Every key is optional; omitted keys take the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::protonet::{BackboneKind, ModelConfig, DEFAULT_PROTOTYPES_PER_CLASS, DEFAULT_PROTOTYPE_DIM};
use crate::trainer::{LastLayerConfig, OptimizerKind, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneKind,
    /// Square input side; 0 means the backbone's native size.
    pub input_size: usize,
    pub prototypes_per_class: usize,
    pub prototype_dim: usize,
    /// Optional safetensors file with pretrained backbone weights.
    pub backbone_weights: Option<std::path::PathBuf>,
    pub augment: bool,

    pub lr_phase1: f64,
    pub epochs_phase1: usize,
    pub lr_phase2: f64,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub projection_period: usize,
    pub warm_epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,

    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub margin: f64,

    pub last_layer_epochs: usize,
    pub last_layer_lr: f64,
    pub last_layer_l1: f64,

    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let w = LossWeights::default();
        let l = LastLayerConfig::default();
        Self {
            backbone: BackboneKind::Vgg19,
            input_size: 0,
            prototypes_per_class: DEFAULT_PROTOTYPES_PER_CLASS,
            prototype_dim: DEFAULT_PROTOTYPE_DIM,
            backbone_weights: None,
            augment: true,
            lr_phase1: t.lr_phase1,
            epochs_phase1: t.epochs_phase1,
            lr_phase2: t.lr_phase2,
            epochs_phase2: t.epochs_phase2,
            batch_size: t.batch_size,
            eval_batch_size: t.eval_batch_size,
            projection_period: t.projection_period,
            warm_epochs: t.warm_epochs,
            optimizer: t.optimizer,
            seed: t.seed,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            margin: w.margin,
            last_layer_epochs: 0,
            last_layer_lr: l.lr,
            last_layer_l1: l.l1,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone,
            prototypes_per_class: self.prototypes_per_class,
            prototype_dim: self.prototype_dim,
            input_size: if self.input_size == 0 {
                self.backbone.native_input_size()
            } else {
                self.input_size
            },
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr_phase1: self.lr_phase1,
            epochs_phase1: self.epochs_phase1,
            lr_phase2: self.lr_phase2,
            epochs_phase2: self.epochs_phase2,
            batch_size: self.batch_size,
            projection_period: self.projection_period,
            warm_epochs: self.warm_epochs,
            optimizer: self.optimizer,
            seed: self.seed,
            eval_batch_size: self.eval_batch_size,
        }
    }

    pub fn loss(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            margin: self.margin,
        }
    }

    pub fn last_layer(&self) -> LastLayerConfig {
        LastLayerConfig {
            epochs: self.last_layer_epochs,
            lr: self.last_layer_lr,
            l1: self.last_layer_l1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train().validate()?;
        self.loss().validate()?;
        if !(self.val_fraction > 0.0 && self.test_fraction > 0.0 && self.val_fraction + self.test_fraction < 1.0) {
            return Err(Error::Config("split fractions must be positive and sum below 1".into()));
        }
        Ok(())
    }
}
