use std::net::SocketAddr;
use std::sync::Arc;

use anyhow::{Context, Result};
use protomsl::dataset::load_manifest;
use protomsl::protonet::{load_checkpoint, model_version};
use protomsl_service::{build_review, AppState, Catalog, Engine, FeedbackStore, ModelEngine};

use crate::{ExportArgs, ServeArgs};

pub fn serve(a: ServeArgs) -> Result<()> {
    let engine = ModelEngine::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let index = load_manifest(&a.manifest)?;
    if index.class_names() != engine.class_names() {
        anyhow::bail!("manifest classes do not match the checkpoint's");
    }
    let catalog = Catalog::new(index, engine.input_size());
    let store = FeedbackStore::open(&a.db).with_context(|| format!("opening {}", a.db.display()))?;
    log::info!("serving model {} with feedback in {}", engine.model_version(), a.db.display());
    let mut state = AppState::new(Arc::new(engine), catalog, store);
    if let Some(ui) = &a.ui {
        state = state.with_ui_dir(ui);
    }
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse()?;
    tokio::runtime::Runtime::new()?.block_on(protomsl_service::serve(addr, Arc::new(state)))?;
    Ok(())
}

pub fn export_review(a: ExportArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint, &candle_core::Device::Cpu)?;
    let version = match a.model_version {
        Some(v) => v,
        None => model_version(&a.checkpoint)?,
    };
    let store = FeedbackStore::open(&a.db)?;
    let records = store.list(&version)?;
    let names = ck.model.class_names();
    let export = build_review(&version, &records, names);
    print!("{}", export.render());
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("review.json"), serde_json::to_string_pretty(&export)? + "\n")?;
    std::fs::write(a.out.join("label_patch.csv"), export.label_patch_csv(names))?;
    std::fs::write(a.out.join("prototype_complaints.csv"), export.complaints_csv())?;
    println!("wrote review.json, label_patch.csv and prototype_complaints.csv to {}", a.out.display());
    Ok(())
}
