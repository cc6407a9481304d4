//! Dataset to checkpoint to explanation on the synthetic shapes set.

use candle_core::Device;
use protomsl::calibrate::{fit, CalibrationKind, Calibrator};
use protomsl::dataset::synthetic::{write_shapes_dataset, ShapesConfig};
use protomsl::dataset::{load_manifest, sol_split, write_manifest, ImageLoader, Split};
use protomsl::explain::explain_image;
use protomsl::objectives::LossWeights;
use protomsl::protonet::{load_checkpoint, model_version, save_checkpoint, BackboneKind, ModelConfig, ProtoNet};
use protomsl::trainer::{predict_logits, TrainConfig, Trainer, TrainingData};

#[test]
fn short_run_round_trips_through_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let index = write_shapes_dataset(dir.path().join("shapes"), &ShapesConfig::default()).unwrap();
    let index = sol_split(&index, 0.2, 0.2).unwrap();
    let manifest = dir.path().join("run").join("split.csv");
    std::fs::create_dir_all(manifest.parent().unwrap()).unwrap();
    write_manifest(&index, &manifest).unwrap();
    let reloaded = load_manifest(&manifest).unwrap();
    assert_eq!(reloaded.entries(), index.entries());

    let loader = ImageLoader::new(32);
    let data = TrainingData::load(&reloaded, &loader, true).unwrap();
    assert!(data.train.len() > reloaded.split_len(Split::Train), "augmentation adds samples");

    let mut config = ModelConfig::new(BackboneKind::Tiny);
    config.prototypes_per_class = 3;
    config.prototype_dim = 16;
    let mut model = ProtoNet::new(config, reloaded.class_names().to_vec(), &Device::Cpu).unwrap();
    let train = TrainConfig {
        lr_phase1: 1e-3,
        lr_phase2: 1e-4,
        epochs_phase1: 5,
        epochs_phase2: 5,
        batch_size: 40,
        projection_period: 5,
        warm_epochs: 1,
        seed: 3,
        ..Default::default()
    };
    let out = dir.path().join("train");
    let state = Trainer::new(train, LossWeights::default())
        .with_output(&out, serde_json::json!({"note": "integration"}))
        .train(&mut model, &data)
        .unwrap();
    assert_eq!(state.metrics.len(), 10);
    assert!(model.is_projected());
    assert!(out.join("metrics.jsonl").is_file());

    // every prototype sits on a TRAIN image of its own class
    for (proto, source) in model.prototypes().unwrap().iter().zip(model.sources()) {
        let src = source.as_ref().unwrap();
        let entry = reloaded.get(&src.image_id).unwrap();
        assert_eq!(entry.split, Some(Split::Train));
        assert_eq!(entry.label, proto.class_id);
    }

    let val: Vec<_> = reloaded.split(Split::Val).collect();
    let images: Vec<_> = val.iter().map(|e| loader.load(e).unwrap()).collect();
    let labels: Vec<usize> = val.iter().map(|e| e.label).collect();
    let logits = predict_logits(&model, &images, 8).unwrap();
    let calibration = fit(CalibrationKind::Temperature, &logits, &labels).unwrap();
    assert!(calibration.nll_after <= calibration.nll_before + 1e-12);

    let path = dir.path().join("model.safetensors");
    let version = save_checkpoint(&path, &model, Some(&calibration.calibrator), &serde_json::json!({})).unwrap();
    assert_eq!(version, model_version(&path).unwrap());
    let ck = load_checkpoint(&path, &Device::Cpu).unwrap();
    assert_eq!(ck.version, version);
    assert_eq!(ck.calibrator.as_ref(), Some(&calibration.calibrator));
    assert_eq!(ck.model.sources(), model.sources());
    let again = predict_logits(&ck.model, &images, 8).unwrap();
    for (a, b) in logits.iter().zip(&again) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    let calibrator = ck.calibrator.clone().unwrap_or(Calibrator::None);
    let expl = explain_image(&ck.model, &calibrator, &images[0], &val[0].image_id, 4).unwrap();
    assert_eq!(expl.items.len(), 4);
    let forward = ck.model.forward(&images[0]).unwrap();
    let top = forward.similarity_scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    assert!((expl.items[0].similarity_score - top).abs() < 1e-3 * top.max(1.0));
    for pair in expl.items.windows(2) {
        assert!(pair[0].similarity_score >= pair[1].similarity_score);
    }
    for item in &expl.items {
        assert!(item.test_bbox.width() > 0 && item.test_bbox.height() > 0);
        assert!(reloaded.get(&item.source_image_id).is_some());
    }
}
