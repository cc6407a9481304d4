use std::path::Path;

use anyhow::Result;
use protomsl::dataset::synthetic::{write_shapes_dataset, ShapesConfig};
use protomsl::dataset::{load_manifest, sol_split, write_manifest, DatasetIndex};

use crate::DatasetCommand;

fn summary(index: &DatasetIndex) -> String {
    format!("{} images in {} classes", index.len(), index.num_classes())
}

pub fn run(cmd: DatasetCommand) -> Result<()> {
    match cmd {
        DatasetCommand::Validate { manifest } => {
            let index = load_manifest(&manifest)?;
            let missing: Vec<&Path> = index
                .entries()
                .iter()
                .map(|e| e.path.as_path())
                .filter(|p| !p.is_file())
                .collect();
            for p in &missing {
                eprintln!("missing image: {}", p.display());
            }
            if !missing.is_empty() {
                anyhow::bail!("{} of {} images are missing", missing.len(), index.len());
            }
            println!("ok: {}", summary(&index));
        }
        DatasetCommand::Split {
            manifest,
            val_frac,
            test_frac,
            out,
        } => {
            let index = load_manifest(&manifest)?;
            let split = sol_split(&index, val_frac, test_frac)?;
            let out = out.unwrap_or_else(|| {
                let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
                manifest.with_file_name(format!("{stem}.split.csv"))
            });
            write_manifest(&split, &out)?;
            print!("{}", split.stats_table());
            println!("wrote {}", out.display());
        }
        DatasetCommand::Stats { manifest } => {
            let index = load_manifest(&manifest)?;
            print!("{}", index.stats_table());
        }
        DatasetCommand::Synth { out, images, size, seed } => {
            let cfg = ShapesConfig {
                num_images: images,
                image_size: size,
                seed,
            };
            let index = write_shapes_dataset(&out, &cfg)?;
            println!("wrote {} to {}", summary(&index), out.join("manifest.csv").display());
        }
    }
    Ok(())
}
