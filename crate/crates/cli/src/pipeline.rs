use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::Device;
use image::RgbImage;
use protomsl::analytics::{
    diversity_curve, inclass_curve, plot_curves, read_jsonl, render_curves, render_table, write_jsonl, EvidenceTrace,
    PredictionRecord, TableRow, TraceItem,
};
use protomsl::calibrate::{abstains, confidence, expected_calibration_error, fit, softmax, CalibrationKind, Calibrator};
use protomsl::config::RunConfig;
use protomsl::dataset::{load_manifest, sol_split, write_manifest, DatasetIndex, ImageEntry, ImageLoader, Split};
use protomsl::explain::{explain_image, render_panel, PanelOptions};
use protomsl::protonet::{load_checkpoint, save_checkpoint, Checkpoint, ProtoNet};
use protomsl::trainer::{last_layer_tune, predict_logits, Trainer, TrainingData};

use crate::{CalibrateArgs, EvaluateArgs, ExplainArgs, ReportArgs, TrainArgs};

const ECE_BINS: usize = 15;

/// Splits by sol when any entry lacks a split.
fn ensure_split(index: DatasetIndex, val: f64, test: f64) -> Result<DatasetIndex> {
    if index.entries().iter().all(|e| e.split.is_some()) {
        return Ok(index);
    }
    log::info!("manifest has unassigned entries; splitting by sol (val {val}, test {test})");
    Ok(sol_split(&index, val, test)?)
}

fn run_fraction(ck: &Checkpoint, key: &str) -> f64 {
    ck.run_config.get(key).and_then(|v| v.as_f64()).unwrap_or(0.1)
}

fn eval_batch(ck: &Checkpoint) -> usize {
    ck.run_config
        .get("eval_batch_size")
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .unwrap_or(32)
}

fn load_split_index(ck: &Checkpoint, manifest: &Path) -> Result<DatasetIndex> {
    let index = load_manifest(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    if index.class_names() != ck.model.class_names() {
        bail!(
            "manifest classes {:?} do not match the checkpoint's {:?}",
            index.class_names(),
            ck.model.class_names()
        );
    }
    ensure_split(index, run_fraction(ck, "val_fraction"), run_fraction(ck, "test_fraction"))
}

fn load_images(loader: &ImageLoader, entries: &[&ImageEntry]) -> Result<Vec<RgbImage>> {
    entries.iter().map(|e| Ok(loader.load(e)?)).collect()
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(b) = &a.backbone {
        cfg.backbone = b.parse().map_err(anyhow::Error::msg)?;
    }
    macro_rules! override_field {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    override_field!(lambda1, lambda2, lambda3, margin, seed, epochs_phase1, epochs_phase2);
    if a.backbone_weights.is_some() {
        cfg.backbone_weights = a.backbone_weights.clone();
    }
    cfg.validate()?;

    let index = ensure_split(load_manifest(&a.manifest)?, cfg.val_fraction, cfg.test_fraction)?;
    print!("{}", index.stats_table());
    let mc = cfg.model();
    let mut model = ProtoNet::new(mc.clone(), index.class_names().to_vec(), &Device::Cpu)?;
    if let Some(w) = &cfg.backbone_weights {
        let n = model.load_backbone_weights(w)?;
        log::info!("loaded {n} backbone tensors from {}", w.display());
    } else {
        log::warn!("no backbone weights given; the backbone starts from random initialisation");
    }
    let loader = ImageLoader::new(mc.input_size);
    let data = TrainingData::load(&index, &loader, cfg.augment)?;
    log::info!("{} training samples, {} validation images", data.train.len(), data.val.len());

    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    write_manifest(&index, a.out.join("split.csv"))?;
    let run_json = serde_json::to_value(&cfg)?;
    let trainer = Trainer::new(cfg.train(), cfg.loss()).with_output(&a.out, run_json.clone());
    let state = trainer.train(&mut model, &data)?;
    match (state.best_val_acc, state.best_epoch) {
        (Some(acc), Some(epoch)) => println!("best projected model: epoch {epoch}, val acc {:.4}", acc),
        _ => println!("no projection ran; keeping the final model"),
    }
    if cfg.last_layer_epochs > 0 {
        let rep = last_layer_tune(
            &mut model,
            &data.train_images,
            &data.train_labels(),
            &cfg.last_layer(),
            cfg.eval_batch_size,
        )?;
        println!(
            "last layer: cross-entropy {:.4} -> {:.4}",
            rep.crsent_before, rep.crsent_after
        );
    }
    let path = a.out.join("model.safetensors");
    let version = save_checkpoint(&path, &model, None, &run_json)?;
    println!("wrote {} (version {version})", path.display());
    Ok(())
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let kind: CalibrationKind = a.method.parse().map_err(anyhow::Error::msg)?;
    let ck = load_checkpoint(&a.checkpoint, &Device::Cpu)?;
    let index = load_split_index(&ck, &a.manifest)?;
    let loader = ImageLoader::new(ck.model.input_size());
    let val: Vec<&ImageEntry> = index.split(Split::Val).collect();
    if val.is_empty() {
        bail!("the VAL split is empty");
    }
    let images = load_images(&loader, &val)?;
    let labels: Vec<usize> = val.iter().map(|e| e.label).collect();
    let logits = predict_logits(&ck.model, &images, eval_batch(&ck))?;
    let rep = fit(kind, &logits, &labels)?;
    let raw: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
    let cal: Vec<Vec<f64>> = logits.iter().map(|z| rep.calibrator.apply(z)).collect::<protomsl::Result<_>>()?;
    let ece_before = expected_calibration_error(&raw, &labels, ECE_BINS)?.ece;
    let ece_after = expected_calibration_error(&cal, &labels, ECE_BINS)?.ece;
    println!("calibrator: {}", serde_json::to_string(&rep.calibrator)?);
    println!("VAL NLL {:.5} -> {:.5} ({} iterations, |grad| {:.2e})", rep.nll_before, rep.nll_after, rep.iterations, rep.gradient_norm);
    println!("VAL ECE {:.4} -> {:.4}", ece_before, ece_after);
    let out = a.out.unwrap_or(a.checkpoint);
    let version = save_checkpoint(&out, &ck.model, Some(&rep.calibrator), &ck.run_config)?;
    println!("wrote {} (version {version})", out.display());
    Ok(())
}

fn trace_split(s: &str) -> Result<Option<Split>> {
    Ok(match s {
        "all" => None,
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        "test" => Some(Split::Test),
        other => bail!("unknown split `{other}` (expected train, val, test or all)"),
    })
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let traced = trace_split(&a.trace_split)?;
    let ck = load_checkpoint(&a.checkpoint, &Device::Cpu)?;
    let calibrator = ck.calibrator.clone().unwrap_or(Calibrator::None);
    if calibrator == Calibrator::None {
        log::warn!("checkpoint has no calibrator; confidences are raw softmax");
    }
    let index = load_split_index(&ck, &a.manifest)?;
    let loader = ImageLoader::new(ck.model.input_size());
    let entries: Vec<&ImageEntry> = index.entries().iter().filter(|e| e.split.is_some()).collect();
    let images = load_images(&loader, &entries)?;
    let logits = predict_logits(&ck.model, &images, eval_batch(&ck))?;
    let mut records = Vec::with_capacity(entries.len());
    for (e, z) in entries.iter().zip(logits) {
        let probabilities = calibrator.apply(&z)?;
        let (predicted_label, conf) = confidence(&probabilities);
        records.push(PredictionRecord {
            image_id: e.image_id.clone(),
            split: e.split,
            true_label: e.label,
            predicted_label,
            confidence: conf,
            logits: z,
            probabilities,
            abstained: abstains(conf, a.threshold),
        });
    }
    std::fs::create_dir_all(&a.out)?;
    write_jsonl(a.out.join("predictions.jsonl"), &records)?;

    let mut traces = Vec::new();
    if ck.model.is_projected() {
        for (e, img) in entries.iter().zip(&images) {
            if traced.is_some() && e.split != traced {
                continue;
            }
            let expl = explain_image(&ck.model, &calibrator, img, &e.image_id, a.k)?;
            traces.push(EvidenceTrace {
                image_id: e.image_id.clone(),
                split: e.split,
                true_label: e.label,
                correct: expl.predicted_class == e.label,
                top_prototypes: expl
                    .items
                    .iter()
                    .map(|i| TraceItem {
                        prototype_id: i.prototype_id,
                        prototype_class: i.prototype_class,
                        source_image_id: i.source_image_id.clone(),
                    })
                    .collect(),
            });
        }
        write_jsonl(a.out.join("traces.jsonl"), &traces)?;
    } else {
        log::warn!("prototypes were never projected; skipping traces.jsonl");
    }
    let rows = [
        TableRow::baseline(&index),
        TableRow::from_records(calibrator_name(&calibrator), &records, a.threshold)?,
    ];
    print!("{}", render_table(&rows, a.threshold));
    println!(
        "wrote {} predictions and {} traces to {}",
        records.len(),
        traces.len(),
        a.out.display()
    );
    Ok(())
}

fn calibrator_name(c: &Calibrator) -> &'static str {
    match c {
        Calibrator::None => "Model",
        Calibrator::Temperature { .. } => "Model + TempCal",
        Calibrator::Vector { .. } => "Model + VectorCal",
    }
}

pub fn explain(a: ExplainArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint, &Device::Cpu)?;
    let calibrator = ck.calibrator.clone().unwrap_or(Calibrator::None);
    let index = load_manifest(&a.manifest)?;
    let loader = ImageLoader::new(ck.model.input_size());
    let entry = index
        .get(&a.image)
        .with_context(|| format!("image `{}` is not in the manifest", a.image))?;
    let img = loader.load(entry)?;
    let expl = explain_image(&ck.model, &calibrator, &img, &a.image, a.k)?;
    if let Some(w) = &expl.warning {
        log::warn!("{w}");
    }
    let json = serde_json::to_string_pretty(&expl)?;
    match &a.json {
        Some(p) => std::fs::write(p, json + "\n")?,
        None if a.out.is_none() => println!("{json}"),
        None => {}
    }
    if let Some(out) = &a.out {
        let panel = render_panel(
            &expl,
            &img,
            |id, variant| {
                let e = index
                    .get(id)
                    .ok_or_else(|| protomsl::Error::Dataset(format!("source image `{id}` is not in the manifest")))?;
                loader.load_variant(e, variant)
            },
            &PanelOptions::default(),
        )?;
        panel.save(out)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn parse_row(spec: &str) -> Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => bail!("row `{spec}` must look like NAME=predictions.jsonl"),
    }
}

fn class_names(a: &ReportArgs, traces: &[EvidenceTrace]) -> Result<Vec<String>> {
    if let Some(p) = &a.classes {
        return Ok(std::fs::read_to_string(p)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect());
    }
    let n = traces
        .iter()
        .flat_map(|t| std::iter::once(t.true_label).chain(t.top_prototypes.iter().map(|p| p.prototype_class)))
        .max()
        .map_or(0, |m| m + 1);
    Ok((0..n).map(|c| format!("class {c}")).collect())
}

pub fn report(a: ReportArgs) -> Result<()> {
    if a.rows.is_empty() && a.traces.is_none() && a.baseline.is_none() {
        bail!("nothing to report; pass --row, --baseline or --traces");
    }
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
    }
    let mut rows = Vec::new();
    if let Some(m) = &a.baseline {
        rows.push(TableRow::baseline(&load_manifest(m)?));
    }
    for spec in &a.rows {
        let (name, path) = parse_row(spec)?;
        let records: Vec<PredictionRecord> =
            read_jsonl(&path).with_context(|| format!("reading {}", path.display()))?;
        rows.push(TableRow::from_records(name, &records, a.threshold)?);
    }
    if !rows.is_empty() {
        let table = render_table(&rows, a.threshold);
        print!("{table}");
        if let Some(out) = &a.out {
            std::fs::write(out.join("table.txt"), &table)?;
        }
    }
    if let Some(path) = &a.traces {
        let traces: Vec<EvidenceTrace> = read_jsonl(path).with_context(|| format!("reading {}", path.display()))?;
        let names = class_names(&a, &traces)?;
        let div = diversity_curve(&traces, names.len(), a.k_max)?;
        let inc = inclass_curve(&traces, names.len(), a.k_max, a.correct_only)?;
        println!("\ndistinct source images among top-k prototypes (correct predictions)");
        print!("{}", render_curves(&div, &names));
        println!("\nin-class prototypes among top-k");
        print!("{}", render_curves(&inc, &names));
        if let Some(out) = &a.out {
            plot_curves(out.join("diversity.svg"), &div, &names, "Prototype diversity", "distinct sources")?;
            plot_curves(out.join("inclass.svg"), &inc, &names, "In-class prototypes", "in-class prototypes")?;
        }
    }
    Ok(())
}
