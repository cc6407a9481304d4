//! Training schedule: gradient epochs on prototypes and the convolutional
//! stack, prototype projection every few epochs, and model selection on
//! validation accuracy. Also the convex last-layer tuning step.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{images_to_tensor, AugmentationRecipe, DatasetIndex, ImageLoader, Split, Variant};
use crate::error::{Error, Result};
use crate::objectives::{forward_loss, LossBreakdown, LossWeights};
use crate::protonet::{
    apply_projection, feature_maps_from_tensor, save_checkpoint, NearestPatchSearch, ParamGroup, PoolImage,
    ProtoNet,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_phase1: f64,
    pub epochs_phase1: usize,
    pub lr_phase2: f64,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub projection_period: usize,
    /// Leading epochs during which the backbone is frozen.
    pub warm_epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Batch size for evaluation and projection passes.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_phase1: 1e-4,
            epochs_phase1: 100,
            lr_phase2: 1e-5,
            epochs_phase2: 100,
            batch_size: 80,
            projection_period: 5,
            warm_epochs: 5,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.epochs_phase1 + self.epochs_phase2
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.projection_period == 0 {
            return Err(Error::Config("batch sizes and projection_period must be positive".into()));
        }
        if self.total_epochs() % self.projection_period != 0 {
            return Err(Error::Config(format!(
                "{} total epochs is not a multiple of projection_period {}",
                self.total_epochs(),
                self.projection_period
            )));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if epoch <= self.epochs_phase1 {
            self.lr_phase1
        } else {
            self.lr_phase2
        }
    }
}

/// One augmented training sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub image_id: String,
    pub label: usize,
    pub variant: Variant,
}

/// Decoded images for training: augmented TRAIN samples and plain VAL images.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub train_images: Vec<RgbImage>,
    pub train: Vec<SampleMeta>,
    pub val_images: Vec<RgbImage>,
    pub val: Vec<SampleMeta>,
}

impl TrainingData {
    /// Loads TRAIN entries with their instrument's augmentation recipe (or
    /// only the original when `augment` is false) and VAL entries unaugmented.
    pub fn load(index: &DatasetIndex, loader: &ImageLoader, augment: bool) -> Result<Self> {
        let mut data = TrainingData {
            train_images: Vec::new(),
            train: Vec::new(),
            val_images: Vec::new(),
            val: Vec::new(),
        };
        for entry in index.split(Split::Train) {
            let img = loader.load(entry)?;
            let recipe = if augment {
                AugmentationRecipe::for_instrument(entry.instrument)
            } else {
                AugmentationRecipe::identity()
            };
            for (aug, variant) in crate::dataset::augment(&img, &recipe)? {
                data.train_images.push(aug);
                data.train.push(SampleMeta {
                    image_id: entry.image_id.clone(),
                    label: entry.label,
                    variant,
                });
            }
        }
        for entry in index.split(Split::Val) {
            data.val_images.push(loader.load(entry)?);
            data.val.push(SampleMeta {
                image_id: entry.image_id.clone(),
                label: entry.label,
                variant: Variant::Orig,
            });
        }
        if data.train.is_empty() || data.val.is_empty() {
            return Err(Error::Split("training needs non-empty TRAIN and VAL splits".into()));
        }
        Ok(data)
    }

    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|s| s.label).collect()
    }

    pub fn val_labels(&self) -> Vec<usize> {
        self.val.iter().map(|s| s.label).collect()
    }
}

/// Logits for a list of images, computed in batches.
pub fn predict_logits(model: &ProtoNet, images: &[RgbImage], batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let refs: Vec<&RgbImage> = chunk.iter().collect();
        let x = images_to_tensor(&refs, model.device())?;
        let f = model.forward_batch(&x)?;
        let rows: Vec<Vec<f64>> = f.logits.to_dtype(DType::F64)?.to_vec2()?;
        out.extend(rows);
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of images whose argmax logit equals the label.
pub fn evaluate(model: &ProtoNet, images: &[RgbImage], labels: &[usize], batch: usize) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("no images to evaluate".into()));
    }
    let logits = predict_logits(model, images, batch)?;
    let correct = logits
        .iter()
        .zip(labels)
        .filter(|(z, &y)| argmax(z) == y)
        .count();
    Ok(correct as f64 / images.len() as f64)
}

/// Projects the model's prototypes onto the nearest same-class patch of the
/// given samples. Returns the number of distinct source images.
pub fn project_model(model: &mut ProtoNet, images: &[RgbImage], samples: &[SampleMeta], batch: usize) -> Result<usize> {
    let prototypes = model.prototypes()?;
    let mut search = NearestPatchSearch::new(&prototypes, model.input_size());
    for (imgs, metas) in images.chunks(batch.max(1)).zip(samples.chunks(batch.max(1))) {
        let refs: Vec<&RgbImage> = imgs.iter().collect();
        let ids: Vec<&str> = metas.iter().map(|m| m.image_id.as_str()).collect();
        let x = images_to_tensor(&refs, model.device())?;
        let maps = feature_maps_from_tensor(&model.features(&x)?, &ids)?;
        for (fm, meta) in maps.into_iter().zip(metas) {
            search.offer(&PoolImage {
                feature_map: fm,
                class_id: meta.label,
                variant: meta.variant,
            })?;
        }
    }
    let projected = apply_projection(&prototypes, search.finish())?;
    let distinct: std::collections::BTreeSet<&str> = projected
        .iter()
        .filter_map(|p| p.source.as_ref().map(|s| s.image_id.as_str()))
        .collect();
    let n = distinct.len();
    model.set_prototypes(&projected)?;
    Ok(n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub backbone_frozen: bool,
    pub loss: LossBreakdown,
    /// Running accuracy over the epoch's training batches.
    pub train_acc: f64,
    pub val_acc: f64,
    pub projected: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_acc_before_projection: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_acc_after_projection: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc_after_projection: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distinct_source_images: Option<usize>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    /// Best validation accuracy among projected models.
    pub best_val_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
    pub loss_history: Vec<LossBreakdown>,
    pub metrics: Vec<EpochMetrics>,
}

/// Drives [`train`](Trainer::train). When an output directory is set, the
/// trainer writes `metrics.jsonl` (one record per epoch), `best.safetensors`
/// on every validation improvement, and `diverged.safetensors` on a
/// non-finite loss.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub weights: LossWeights,
    pub out_dir: Option<PathBuf>,
    pub run_config: serde_json::Value,
}

impl Trainer {
    pub fn new(config: TrainConfig, weights: LossWeights) -> Self {
        Self {
            config,
            weights,
            out_dir: None,
            run_config: serde_json::Value::Null,
        }
    }

    pub fn with_output(mut self, dir: impl Into<PathBuf>, run_config: serde_json::Value) -> Self {
        self.out_dir = Some(dir.into());
        self.run_config = run_config;
        self
    }

    fn save(&self, model: &ProtoNet, name: &str) -> Result<Option<PathBuf>> {
        match &self.out_dir {
            Some(dir) => {
                let path = dir.join(name);
                save_checkpoint(&path, model, None, &self.run_config)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    }

    pub fn train(&self, model: &mut ProtoNet, data: &TrainingData) -> Result<TrainState> {
        let cfg = &self.config;
        cfg.validate()?;
        self.weights.validate()?;
        if data.train.is_empty() || data.val.is_empty() {
            return Err(Error::Split("training needs non-empty TRAIN and VAL splits".into()));
        }
        let mut metrics_out = match &self.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
            }
            None => None,
        };
        let mut state = TrainState::default();
        if cfg.total_epochs() == 0 {
            return Ok(state);
        }
        let vars = model.trainable_vars(&[ParamGroup::Backbone, ParamGroup::AddOn, ParamGroup::Prototypes]);
        let mut opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: cfg.lr_phase1,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let val_labels = data.val_labels();
        let train_labels = data.train_labels();
        let mut best = None;
        let prototype_class = model.prototype_class().to_vec();

        for epoch in 1..=cfg.total_epochs() {
            let started = Instant::now();
            let lr = cfg.lr_at(epoch);
            opt.set_learning_rate(lr);
            let frozen = epoch <= cfg.warm_epochs;
            let last_good = model.snapshot()?;
            order.shuffle(&mut rng);
            let mut parts = Vec::new();
            let mut correct = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                let refs: Vec<&RgbImage> = batch.iter().map(|&i| &data.train_images[i]).collect();
                let labels: Vec<u32> = batch.iter().map(|&i| data.train[i].label as u32).collect();
                let x = images_to_tensor(&refs, model.device())?;
                let out = model.forward_features(&model.features_with(&x, frozen)?)?;
                let (loss, breakdown) = forward_loss(&out, &labels, &prototype_class, &self.weights)?;
                if !breakdown.is_finite() {
                    model.restore(&last_good)?;
                    let checkpoint = self.save(model, "diverged.safetensors")?;
                    log::error!("non-finite loss at epoch {epoch}: {breakdown:?}");
                    return Err(Error::Diverged { epoch, checkpoint });
                }
                let pred: Vec<u32> = out.logits.argmax(D::Minus1)?.to_vec1()?;
                correct += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
                opt.backward_step(&loss)?;
                parts.push((breakdown, batch.len()));
            }
            let loss = LossBreakdown::weighted_mean(&parts);
            let val_acc = evaluate(model, &data.val_images, &val_labels, cfg.eval_batch_size)?;
            let mut m = EpochMetrics {
                epoch,
                lr,
                backbone_frozen: frozen,
                loss,
                train_acc: correct as f64 / data.train.len() as f64,
                val_acc,
                projected: false,
                train_acc_before_projection: None,
                train_acc_after_projection: None,
                val_acc_after_projection: None,
                distinct_source_images: None,
                seconds: 0.0,
            };
            if epoch % cfg.projection_period == 0 {
                let before = evaluate(model, &data.train_images, &train_labels, cfg.eval_batch_size)?;
                let distinct = project_model(model, &data.train_images, &data.train, cfg.eval_batch_size)?;
                let after = evaluate(model, &data.train_images, &train_labels, cfg.eval_batch_size)?;
                let val_after = evaluate(model, &data.val_images, &val_labels, cfg.eval_batch_size)?;
                m.projected = true;
                m.train_acc_before_projection = Some(before);
                m.train_acc_after_projection = Some(after);
                m.val_acc_after_projection = Some(val_after);
                m.distinct_source_images = Some(distinct);
                if state.best_val_acc.is_none_or(|b| val_after >= b) {
                    state.best_val_acc = Some(val_after);
                    state.best_epoch = Some(epoch);
                    state.best_checkpoint = self.save(model, "best.safetensors")?;
                    best = Some(model.snapshot()?);
                }
            }
            m.seconds = started.elapsed().as_secs_f64();
            log::info!(
                "epoch {epoch}: loss {:.4} train {:.3} val {:.3}{}",
                m.loss.total,
                m.train_acc,
                m.val_acc,
                if m.projected { " (projected)" } else { "" }
            );
            if let Some(w) = metrics_out.as_mut() {
                serde_json::to_writer(&mut *w, &m)?;
                w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io("metrics.jsonl", e))?;
            }
            state.epoch = epoch;
            state.loss_history.push(loss);
            state.metrics.push(m);
        }
        if let Some(snapshot) = best {
            model.restore(&snapshot)?;
        }
        Ok(state)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LastLayerConfig {
    pub epochs: usize,
    /// Initial step size; shrunk by backtracking as needed.
    pub lr: f64,
    /// L1 penalty on connections to out-of-class prototypes.
    pub l1: f64,
}

impl Default for LastLayerConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1.0,
            l1: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LastLayerReport {
    pub crsent_before: f64,
    pub crsent_after: f64,
    /// Penalised objective after each step, starting with the initial value.
    pub objective: Vec<f64>,
}

fn ce_and_grad(s: &DMatrix<f64>, w: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let logits = s * w.transpose();
    let n = s.nrows() as f64;
    let mut resid = DMatrix::zeros(logits.nrows(), logits.ncols());
    let mut ce = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(i).iter().cloned().collect();
        let p = crate::calibrate::softmax(&row);
        ce -= p[y].max(f64::MIN_POSITIVE).ln();
        for (c, pc) in p.iter().enumerate() {
            resid[(i, c)] = pc - if c == y { 1.0 } else { 0.0 };
        }
    }
    (ce / n, resid.transpose() * s / n)
}

/// Tunes only the evidence layer on fixed similarity scores of the training
/// samples, by proximal gradient descent with backtracking (monotone in the
/// penalised objective).
pub fn last_layer_tune(
    model: &mut ProtoNet,
    images: &[RgbImage],
    labels: &[usize],
    config: &LastLayerConfig,
    batch: usize,
) -> Result<LastLayerReport> {
    if !model.is_projected() {
        return Err(Error::NotProjected);
    }
    let w0 = model.last_layer()?;
    let (c, p) = (w0.len(), w0[0].len());
    let mut w = DMatrix::from_fn(c, p, |i, j| w0[i][j] as f64);
    let mut scores = Vec::with_capacity(images.len() * p);
    for chunk in images.chunks(batch.max(1)) {
        let refs: Vec<&RgbImage> = chunk.iter().collect();
        let x = images_to_tensor(&refs, model.device())?;
        let sims: Vec<f64> = model
            .forward_batch(&x)?
            .similarities
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?;
        scores.extend(sims);
    }
    let s = DMatrix::from_row_slice(images.len(), p, &scores);
    let pc = model.prototype_class().to_vec();
    let off = DMatrix::from_fn(c, p, |i, j| if pc[j] == i { 0.0 } else { 1.0 });
    let penalty = |w: &DMatrix<f64>| config.l1 * w.component_mul(&off).abs().sum();
    let prox = |w: &DMatrix<f64>, t: f64| {
        DMatrix::from_fn(c, p, |i, j| {
            let v = w[(i, j)];
            if off[(i, j)] > 0.0 {
                v.signum() * (v.abs() - t * config.l1).max(0.0)
            } else {
                v
            }
        })
    };
    let (ce0, _) = ce_and_grad(&s, &w, labels);
    let mut objective = vec![ce0 + penalty(&w)];
    let mut step = config.lr;
    for _ in 0..config.epochs {
        let (g_val, grad) = ce_and_grad(&s, &w, labels);
        let mut moved = false;
        for _ in 0..50 {
            let cand = prox(&(&w - &grad * step), step);
            let diff = &cand - &w;
            let (g_new, _) = ce_and_grad(&s, &cand, labels);
            if g_new <= g_val + grad.dot(&diff) + diff.norm_squared() / (2.0 * step) + 1e-12 {
                w = cand;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        objective.push(ce_and_grad(&s, &w, labels).0 + penalty(&w));
        if !moved {
            break;
        }
    }
    let (ce1, _) = ce_and_grad(&s, &w, labels);
    let rows: Vec<Vec<f32>> = (0..c).map(|i| (0..p).map(|j| w[(i, j)] as f32).collect()).collect();
    model.set_last_layer(&rows)?;
    Ok(LastLayerReport {
        crsent_before: ce0,
        crsent_after: ce1,
        objective,
    })
}

/// Reads a metrics file written by [`Trainer`].
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Deep copy of a scalar tensor as f64; handy for tests and logging.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protonet::{BackboneKind, ModelConfig};
    use candle_core::Device;
    use image::Rgb;

    fn toy_data() -> TrainingData {
        let colour = |c: usize| match c {
            0 => Rgb([220, 30, 30]),
            _ => Rgb([30, 30, 220]),
        };
        let mut d = TrainingData {
            train_images: vec![],
            train: vec![],
            val_images: vec![],
            val: vec![],
        };
        for i in 0..8 {
            let c = i % 2;
            d.train_images.push(RgbImage::from_pixel(32, 32, colour(c)));
            d.train.push(SampleMeta { image_id: format!("t{i}"), label: c, variant: Variant::Orig });
        }
        for i in 0..2 {
            d.val_images.push(RgbImage::from_pixel(32, 32, colour(i)));
            d.val.push(SampleMeta { image_id: format!("v{i}"), label: i, variant: Variant::Orig });
        }
        d
    }

    fn model() -> ProtoNet {
        let mut cfg = ModelConfig::new(BackboneKind::Tiny);
        cfg.prototypes_per_class = 2;
        cfg.prototype_dim = 8;
        cfg.seed = 5;
        ProtoNet::new(cfg, vec!["red".into(), "blue".into()], &Device::Cpu).unwrap()
    }

    fn short() -> TrainConfig {
        TrainConfig {
            lr_phase1: 1e-2,
            epochs_phase1: 2,
            lr_phase2: 1e-3,
            epochs_phase2: 2,
            batch_size: 4,
            projection_period: 2,
            warm_epochs: 1,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { projection_period: 3, ..short() };
        assert!(bad.validate().is_err());
        let zero = TrainConfig { lr_phase1: 0.0, ..short() };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn empty_schedule_is_a_no_op() {
        let mut m = model();
        let before = m.prototypes().unwrap();
        let cfg = TrainConfig { epochs_phase1: 0, epochs_phase2: 0, ..short() };
        let state = Trainer::new(cfg, LossWeights::default()).train(&mut m, &toy_data()).unwrap();
        assert_eq!(state.loss_history.len(), 0);
        assert_eq!(state.epoch, 0);
        assert_eq!(m.prototypes().unwrap(), before);
    }

    #[test]
    fn deterministic_history_and_projection() {
        let data = toy_data();
        let run = || {
            let mut m = model();
            let s = Trainer::new(short(), LossWeights::default()).train(&mut m, &data).unwrap();
            (s, m.prototypes().unwrap())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(pa, pb);
        assert_eq!(a.loss_history.len(), 4);
        assert!(a.metrics.iter().filter(|m| m.projected).count() == 2);
        assert!(pa.iter().all(|p| p.source.is_some()));
        for m in &a.metrics {
            if let Some(n) = m.distinct_source_images {
                assert!(n <= data.train.len());
            }
        }
    }

    #[test]
    fn last_layer_tune_contract() {
        let data = toy_data();
        let mut m = model();
        let labels = data.train_labels();
        assert!(matches!(
            last_layer_tune(&mut m, &data.train_images, &labels, &LastLayerConfig::default(), 8),
            Err(Error::NotProjected)
        ));
        project_model(&mut m, &data.train_images, &data.train, 8).unwrap();
        let protos = m.prototypes().unwrap();
        let fc = m.last_layer().unwrap();
        let zero = LastLayerConfig { epochs: 0, ..Default::default() };
        last_layer_tune(&mut m, &data.train_images, &labels, &zero, 8).unwrap();
        assert_eq!(m.last_layer().unwrap(), fc);
        let r = last_layer_tune(&mut m, &data.train_images, &labels, &LastLayerConfig::default(), 8).unwrap();
        assert!(r.crsent_after <= r.crsent_before + 1e-6);
        assert!(r.objective.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert_eq!(m.prototypes().unwrap(), protos);
    }

    #[test]
    fn l1_objective_is_monotone() {
        let data = toy_data();
        let mut m = model();
        project_model(&mut m, &data.train_images, &data.train, 8).unwrap();
        let cfg = LastLayerConfig { epochs: 15, lr: 1.0, l1: 1e-2 };
        let r = last_layer_tune(&mut m, &data.train_images, &data.train_labels(), &cfg, 8).unwrap();
        assert!(r.objective.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }
}
