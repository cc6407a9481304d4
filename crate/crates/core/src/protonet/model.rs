use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneKind, Conv2d};
use super::feature_map::{FeatureMap, Prototype, PrototypeSource, SIMILARITY_EPSILON};
use super::params::{ParamGroup, ParamStore};
use crate::dataset::images_to_tensor;
use crate::error::{Error, Result};

pub const DEFAULT_PROTOTYPES_PER_CLASS: usize = 10;
pub const DEFAULT_PROTOTYPE_DIM: usize = 128;

/// Evidence-layer initialisation: in-class and out-of-class connection weights.
pub const IN_CLASS_WEIGHT: f32 = 1.0;
pub const OUT_CLASS_WEIGHT: f32 = -0.5;

fn default_prototypes_per_class() -> usize {
    DEFAULT_PROTOTYPES_PER_CLASS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    #[serde(default = "default_prototypes_per_class")]
    pub prototypes_per_class: usize,
    pub prototype_dim: usize,
    pub input_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(backbone: BackboneKind) -> Self {
        Self {
            backbone,
            prototypes_per_class: DEFAULT_PROTOTYPES_PER_CLASS,
            prototype_dim: DEFAULT_PROTOTYPE_DIM,
            input_size: backbone.native_input_size(),
            seed: 0,
        }
    }

    /// Side of the square feature grid for this configuration.
    pub fn feature_grid(&self) -> usize {
        self.input_size / self.backbone.downsample()
    }

    fn validate(&self) -> Result<()> {
        if self.prototypes_per_class == 0 || self.prototype_dim == 0 {
            return Err(Error::Config(
                "prototypes_per_class and prototype_dim must be positive".into(),
            ));
        }
        let ds = self.backbone.downsample();
        if self.input_size < ds || self.input_size % ds != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {ds} for the {} backbone",
                self.input_size, self.backbone
            )));
        }
        Ok(())
    }
}

/// Everything computed by one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `B x D x H x W` latent patches (after the add-on layers).
    pub features: Tensor,
    /// `B x P x (H*W)` squared patch-prototype distances.
    pub distances: Tensor,
    /// `B x P` nearest-patch distance per prototype.
    pub min_distances: Tensor,
    /// `B x P` similarity score per prototype.
    pub similarities: Tensor,
    /// `B x C`.
    pub logits: Tensor,
}

/// Per-image result of [`ProtoNet::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f32>,
    pub similarity_scores: Vec<f32>,
}

/// Squared Euclidean distances between every latent patch and every prototype.
/// `features` is `B x D x H x W`, `prototypes` is `P x D`; the result is `B x P x (H*W)`.
pub fn patch_distances(features: &Tensor, prototypes: &Tensor) -> Result<Tensor> {
    let (b, d, h, w) = features.dims4()?;
    let (_, pd) = prototypes.dims2()?;
    if pd != d {
        return Err(Error::DimensionMismatch { expected: d, got: pd });
    }
    let z = features.reshape((b, d, h * w))?.transpose(1, 2)?.contiguous()?;
    let z_sq = z.sqr()?.sum_keepdim(2)?;
    let p_sq = prototypes.sqr()?.sum(1)?;
    let cross = z.broadcast_matmul(&prototypes.t()?.contiguous()?)?;
    let dist = z_sq
        .broadcast_sub(&(cross * 2.0)?)?
        .broadcast_add(&p_sq)?
        .relu()?;
    Ok(dist.transpose(1, 2)?.contiguous()?)
}

/// Tensor form of the similarity activation `log((d + 1) / (d + eps))`.
pub fn similarity_tensor(distances: &Tensor) -> Result<Tensor> {
    Ok(((distances + 1.0)?.log()? - (distances + SIMILARITY_EPSILON)?.log()?)?)
}

struct AddOn {
    first: Conv2d,
    second: Conv2d,
}

impl AddOn {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.first.forward(x)?.relu()?;
        Ok(candle_nn::ops::sigmoid(&self.second.forward(&y)?)?)
    }
}

/// Saved copy of all parameter values plus prototype sources.
#[derive(Clone, Debug)]
pub struct ModelSnapshot {
    values: BTreeMap<String, Tensor>,
    sources: Vec<Option<PrototypeSource>>,
}

/// Backbone, add-on layers, prototype layer and evidence layer.
pub struct ProtoNet {
    config: ModelConfig,
    class_names: Vec<String>,
    store: ParamStore,
    backbone: Backbone,
    add_on: AddOn,
    prototypes: Var,
    last_layer: Var,
    prototype_class: Vec<usize>,
    sources: Vec<Option<PrototypeSource>>,
}

impl std::fmt::Debug for ProtoNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProtoNet")
            .field("config", &self.config)
            .field("classes", &self.class_names.len())
            .field("prototypes", &self.prototype_class.len())
            .finish()
    }
}

impl ProtoNet {
    pub fn new(config: ModelConfig, class_names: Vec<String>, device: &Device) -> Result<Self> {
        config.validate()?;
        if class_names.is_empty() {
            return Err(Error::Config("a model needs at least one class".into()));
        }
        let c = class_names.len();
        let m = config.prototypes_per_class;
        let p = c * m;
        let d = config.prototype_dim;
        let mut store = ParamStore::new(config.seed, device);
        let backbone = Backbone::new(config.backbone, &mut store)?;
        let c_b = config.backbone.out_channels();
        let add_on = AddOn {
            first: Conv2d::new(&mut store, "add_on.0", ParamGroup::AddOn, c_b, d, 1, 1, 0, true)?,
            second: Conv2d::new(&mut store, "add_on.2", ParamGroup::AddOn, d, d, 1, 1, 0, true)?,
        };
        let prototypes = store.uniform("prototypes", (p, d), 0.0, 1.0, ParamGroup::Prototypes)?;
        let prototype_class: Vec<usize> = (0..p).map(|j| j / m).collect();
        let mut fc = Vec::with_capacity(c * p);
        for class in 0..c {
            fc.extend(prototype_class.iter().map(|&pc| {
                if pc == class {
                    IN_CLASS_WEIGHT
                } else {
                    OUT_CLASS_WEIGHT
                }
            }));
        }
        let last_layer = store.from_tensor(
            "last_layer",
            Tensor::from_vec(fc, (c, p), device)?,
            ParamGroup::LastLayer,
        )?;
        Ok(Self {
            config,
            class_names,
            store,
            backbone,
            add_on,
            prototypes,
            last_layer,
            prototype_class,
            sources: vec![None; p],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_prototypes(&self) -> usize {
        self.prototype_class.len()
    }

    pub fn prototype_class(&self) -> &[usize] {
        &self.prototype_class
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn input_size(&self) -> usize {
        self.config.input_size
    }

    pub fn is_projected(&self) -> bool {
        self.sources.iter().all(Option::is_some)
    }

    pub fn sources(&self) -> &[Option<PrototypeSource>] {
        &self.sources
    }

    /// Latent patches `B x D x H x W` for a normalised image batch.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        self.features_with(images, false)
    }

    /// As [`features`](Self::features); with `freeze_backbone` no gradient reaches the backbone.
    pub fn features_with(&self, images: &Tensor, freeze_backbone: bool) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.config.input_size || w != self.config.input_size {
            return Err(Error::InputResolution {
                expected: self.config.input_size,
                width: w,
                height: h,
            });
        }
        let f = self.backbone.forward(images)?;
        let f = if freeze_backbone { f.detach() } else { f };
        self.add_on.forward(&f)
    }

    /// Prototype layer and evidence layer on top of precomputed latent patches.
    pub fn forward_features(&self, features: &Tensor) -> Result<ForwardOutput> {
        let distances = patch_distances(features, self.prototypes.as_tensor())?;
        let min_distances = distances.min(D::Minus1)?;
        let similarities = similarity_tensor(&min_distances)?;
        let logits = similarities.matmul(&self.last_layer.as_tensor().t()?)?;
        Ok(ForwardOutput {
            features: features.clone(),
            distances,
            min_distances,
            similarities,
            logits,
        })
    }

    pub fn forward_batch(&self, images: &Tensor) -> Result<ForwardOutput> {
        self.forward_features(&self.features(images)?)
    }

    fn image_tensor(&self, images: &[&RgbImage]) -> Result<Tensor> {
        for img in images {
            if img.width() as usize != self.config.input_size || img.height() as usize != self.config.input_size {
                return Err(Error::InputResolution {
                    expected: self.config.input_size,
                    width: img.width() as usize,
                    height: img.height() as usize,
                });
            }
        }
        images_to_tensor(images, self.device())
    }

    /// Logits and per-prototype similarity scores for one image.
    pub fn forward(&self, image: &RgbImage) -> Result<Forward> {
        let out = self.forward_batch(&self.image_tensor(&[image])?)?;
        Ok(Forward {
            logits: out.logits.squeeze(0)?.to_vec1()?,
            similarity_scores: out.similarities.squeeze(0)?.to_vec1()?,
        })
    }

    pub fn extract_features(&self, image: &RgbImage, image_id: &str) -> Result<FeatureMap> {
        let mut maps = self.feature_maps(&[image], &[image_id])?;
        Ok(maps.remove(0))
    }

    /// Batched feature extraction into per-image [`FeatureMap`]s.
    pub fn feature_maps(&self, images: &[&RgbImage], ids: &[&str]) -> Result<Vec<FeatureMap>> {
        let t = self.image_tensor(images)?;
        let features = self.features(&t)?;
        feature_maps_from_tensor(&features, ids)
    }

    pub fn prototypes(&self) -> Result<Vec<Prototype>> {
        let rows: Vec<Vec<f32>> = self.prototypes.as_tensor().to_vec2()?;
        Ok(rows
            .into_iter()
            .enumerate()
            .map(|(j, vector)| Prototype {
                prototype_id: j,
                class_id: self.prototype_class[j],
                vector,
                source: self.sources[j].clone(),
            })
            .collect())
    }

    /// Replaces prototype vectors and sources. Ids and classes must match the model's.
    pub fn set_prototypes(&mut self, prototypes: &[Prototype]) -> Result<()> {
        if prototypes.len() != self.num_prototypes() {
            return Err(Error::DimensionMismatch {
                expected: self.num_prototypes(),
                got: prototypes.len(),
            });
        }
        let d = self.config.prototype_dim;
        let mut flat = Vec::with_capacity(prototypes.len() * d);
        for (j, p) in prototypes.iter().enumerate() {
            if p.prototype_id != j || p.class_id != self.prototype_class[j] {
                return Err(Error::Checkpoint(format!(
                    "prototype {j} does not match the model layout (id {}, class {})",
                    p.prototype_id, p.class_id
                )));
            }
            if p.vector.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: p.vector.len(),
                });
            }
            flat.extend_from_slice(&p.vector);
        }
        self.prototypes
            .set(&Tensor::from_vec(flat, (prototypes.len(), d), self.device())?)?;
        self.sources = prototypes.iter().map(|p| p.source.clone()).collect();
        Ok(())
    }

    /// Evidence-layer weights, `C` rows of `P` entries.
    pub fn last_layer(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self.last_layer.as_tensor().to_vec2()?)
    }

    pub fn set_last_layer(&mut self, weights: &[Vec<f32>]) -> Result<()> {
        let (c, p) = (self.num_classes(), self.num_prototypes());
        if weights.len() != c || weights.iter().any(|r| r.len() != p) {
            return Err(Error::DimensionMismatch {
                expected: c * p,
                got: weights.iter().map(Vec::len).sum(),
            });
        }
        self.last_layer
            .set(&Tensor::from_vec(weights.concat(), (c, p), self.device())?)?;
        Ok(())
    }

    pub fn trainable_vars(&self, groups: &[ParamGroup]) -> Vec<Var> {
        self.store.trainable(groups)
    }

    pub fn snapshot(&self) -> Result<ModelSnapshot> {
        Ok(ModelSnapshot {
            values: self.store.values()?,
            sources: self.sources.clone(),
        })
    }

    pub fn restore(&mut self, snapshot: &ModelSnapshot) -> Result<()> {
        for (name, value) in &snapshot.values {
            self.store.set(name, value)?;
        }
        self.sources = snapshot.sources.clone();
        Ok(())
    }

    pub(crate) fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .map(|(k, p)| (k.clone(), p.var.as_tensor().clone()))
            .collect()
    }

    pub(crate) fn set_named(&mut self, name: &str, value: &Tensor) -> Result<()> {
        self.store.set(name, value)
    }

    pub(crate) fn set_sources(&mut self, sources: Vec<Option<PrototypeSource>>) -> Result<()> {
        if sources.len() != self.num_prototypes() {
            return Err(Error::DimensionMismatch {
                expected: self.num_prototypes(),
                got: sources.len(),
            });
        }
        self.sources = sources;
        Ok(())
    }

    pub(crate) fn parameter_names(&self) -> Vec<String> {
        self.store.iter().map(|(k, _)| k.clone()).collect()
    }

    /// Loads pretrained backbone weights from a safetensors file with
    /// torchvision parameter names (with or without the `backbone.` prefix).
    /// Every backbone parameter must be present. Returns the number loaded.
    pub fn load_backbone_weights(&mut self, path: impl AsRef<Path>) -> Result<usize> {
        let path = path.as_ref();
        let tensors = candle_core::safetensors::load(path, self.device())?;
        let wanted: Vec<String> = self
            .store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Backbone)
            .map(|(k, _)| k.clone())
            .collect();
        let mut missing = Vec::new();
        let mut loaded = 0;
        for name in &wanted {
            let bare = name.trim_start_matches("backbone.");
            match tensors.get(name).or_else(|| tensors.get(bare)) {
                Some(t) => {
                    self.store.set(name, &t.to_dtype(DType::F32)?)?;
                    loaded += 1;
                }
                None => missing.push(bare.to_string()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "{} is missing {} backbone tensors (first: {})",
                path.display(),
                missing.len(),
                missing[0]
            )));
        }
        Ok(loaded)
    }
}

/// Splits a `B x D x H x W` tensor into per-image feature maps.
pub fn feature_maps_from_tensor(features: &Tensor, ids: &[&str]) -> Result<Vec<FeatureMap>> {
    let (b, d, h, w) = features.dims4()?;
    if ids.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            got: ids.len(),
        });
    }
    let flat: Vec<f32> = features
        .to_dtype(DType::F32)?
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .flatten_all()?
        .to_vec1()?;
    flat.chunks_exact(h * w * d)
        .zip(ids)
        .map(|(chunk, id)| FeatureMap::new(*id, h, w, d, chunk.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protonet::feature_map::{similarity, similarity_activation};
    use image::Rgb;

    fn tiny(classes: usize) -> ProtoNet {
        let mut cfg = ModelConfig::new(BackboneKind::Tiny);
        cfg.prototypes_per_class = 2;
        cfg.prototype_dim = 8;
        cfg.seed = 3;
        ProtoNet::new(cfg, (0..classes).map(|c| format!("c{c}")).collect(), &Device::Cpu).unwrap()
    }

    #[test]
    fn resnet18_feature_grid_is_seven() {
        let mut cfg = ModelConfig::new(BackboneKind::Resnet18);
        cfg.prototypes_per_class = 1;
        let model = ProtoNet::new(cfg, vec!["a".into()], &Device::Cpu).unwrap();
        let img = RgbImage::from_pixel(224, 224, Rgb([90, 20, 200]));
        let fm = model.extract_features(&img, "x").unwrap();
        assert_eq!((fm.height(), fm.width(), fm.depth()), (7, 7, 128));
    }

    #[test]
    fn vgg19_downsamples_by_32() {
        let mut cfg = ModelConfig::new(BackboneKind::Vgg19);
        cfg.input_size = 64;
        cfg.prototypes_per_class = 1;
        cfg.prototype_dim = 16;
        let model = ProtoNet::new(cfg, vec!["a".into()], &Device::Cpu).unwrap();
        let img = RgbImage::from_pixel(64, 64, Rgb([1, 2, 3]));
        let fm = model.extract_features(&img, "x").unwrap();
        assert_eq!((fm.height(), fm.width(), fm.depth()), (2, 2, 16));
    }

    #[test]
    fn zero_image_is_finite_and_deterministic() {
        let model = tiny(2);
        let img = RgbImage::new(32, 32);
        let a = model.extract_features(&img, "z").unwrap();
        let b = model.extract_features(&img, "z").unwrap();
        assert_eq!(a, b);
        assert!(a.values().iter().all(|v| v.is_finite()));
        assert_eq!(model.forward(&img).unwrap(), model.forward(&img).unwrap());
    }

    #[test]
    fn wrong_resolution_rejected() {
        let model = tiny(2);
        let img = RgbImage::new(30, 32);
        assert!(matches!(
            model.forward(&img),
            Err(Error::InputResolution { expected: 32, .. })
        ));
    }

    #[test]
    fn last_layer_initial_pattern() {
        let model = tiny(3);
        let fc = model.last_layer().unwrap();
        assert_eq!(fc.len(), 3);
        for (c, row) in fc.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                let expected = if model.prototype_class()[j] == c { 1.0 } else { -0.5 };
                assert_eq!(w, expected);
            }
        }
        assert_eq!(model.num_prototypes(), 6);
    }

    #[test]
    fn same_seed_same_model() {
        let a = tiny(2).prototypes().unwrap();
        let b = tiny(2).prototypes().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tensor_path_agrees_with_pure_similarity() {
        let model = tiny(2);
        let img = RgbImage::from_fn(32, 32, |x, y| Rgb([(x * 8) as u8, (y * 8) as u8, 40]));
        let fm = model.extract_features(&img, "g").unwrap();
        let fwd = model.forward(&img).unwrap();
        let protos = model.prototypes().unwrap();
        let fc = model.last_layer().unwrap();
        let scores: Vec<f64> = protos
            .iter()
            .map(|p| similarity(&fm, &p.vector).unwrap().score)
            .collect();
        for (s, t) in scores.iter().zip(&fwd.similarity_scores) {
            assert!((s - *t as f64).abs() < 1e-3, "{s} vs {t}");
        }
        let logits = crate::protonet::logits_from_scores(&fc, &scores).unwrap();
        for (a, b) in logits.iter().zip(&fwd.logits) {
            assert!((a - *b as f64).abs() < 1e-2);
        }
    }

    #[test]
    fn distances_match_brute_force() {
        let feats = Tensor::new(&[[[[0.0f64, 1.0]], [[2.0, 0.5]]]], &Device::Cpu).unwrap(); // 1x2x1x2
        let protos = Tensor::new(&[[0.0f64, 0.0], [1.0, 1.0]], &Device::Cpu).unwrap();
        let d: Vec<Vec<Vec<f64>>> = patch_distances(&feats, &protos).unwrap().to_vec3().unwrap();
        // patches: (0, 2) and (1, 0.5)
        assert_eq!(d[0][0], vec![4.0, 1.25]);
        assert_eq!(d[0][1], vec![2.0, 0.25]);
        let s: Vec<f64> = similarity_tensor(&Tensor::new(&[0.0f64, 3.0], &Device::Cpu).unwrap())
            .unwrap()
            .to_vec1()
            .unwrap();
        assert!((s[0] - similarity_activation(0.0)).abs() < 1e-12);
        assert!((s[1] - similarity_activation(3.0)).abs() < 1e-12);
    }

    #[test]
    fn snapshot_restore() {
        let mut model = tiny(2);
        let snap = model.snapshot().unwrap();
        let before = model.prototypes().unwrap();
        let mut moved = before.clone();
        moved[0].vector = vec![9.0; 8];
        model.set_prototypes(&moved).unwrap();
        assert_ne!(model.prototypes().unwrap(), before);
        model.restore(&snap).unwrap();
        assert_eq!(model.prototypes().unwrap(), before);
    }
}
