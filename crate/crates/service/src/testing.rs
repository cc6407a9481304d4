//! Fixtures for exercising the HTTP contract without a trained model.
//!
//! Catalog images are flat colours; the stub engine reads the red channel of
//! the top-left pixel and looks up a scripted prediction for it.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use image::{Rgb, RgbImage};
use protomsl::dataset::{DatasetIndex, ImageEntry, Instrument, Split, Variant};
use protomsl::explain::{EvidenceItem, Explanation};
use protomsl::heatmap::PixelBox;
use protomsl::{Error, Result};

use crate::engine::{Engine, Scored};

pub const STUB_INPUT_SIZE: usize = 8;

/// One scripted image: catalog label, predicted class and confidence.
#[derive(Clone, Debug)]
pub struct StubImage {
    pub image_id: String,
    pub label: usize,
    pub predicted: usize,
    pub confidence: f64,
}

impl StubImage {
    pub fn new(image_id: &str, label: usize, predicted: usize, confidence: f64) -> Self {
        Self {
            image_id: image_id.into(),
            label,
            predicted,
            confidence,
        }
    }
}

pub struct StubEngine {
    version: String,
    classes: Vec<String>,
    prototypes_per_class: usize,
    by_red: HashMap<u8, (usize, f64)>,
    explain_calls: AtomicUsize,
}

impl StubEngine {
    pub fn new(version: &str, classes: &[&str], prototypes_per_class: usize, images: &[StubImage]) -> Self {
        let by_red = images
            .iter()
            .enumerate()
            .map(|(i, s)| (red_of(i), (s.predicted, s.confidence)))
            .collect();
        Self {
            version: version.into(),
            classes: classes.iter().map(|c| c.to_string()).collect(),
            prototypes_per_class,
            by_red,
            explain_calls: AtomicUsize::new(0),
        }
    }

    pub fn explain_calls(&self) -> usize {
        self.explain_calls.load(Ordering::SeqCst)
    }

    fn lookup(&self, image: &RgbImage) -> (usize, f64) {
        let red = image.get_pixel(0, 0)[0];
        self.by_red.get(&red).copied().unwrap_or((0, 1.0 / self.classes.len() as f64))
    }
}

fn red_of(i: usize) -> u8 {
    (10 + 7 * i) as u8
}

/// Probabilities with `confidence` on `predicted` and the rest spread evenly.
pub fn scripted_probabilities(classes: usize, predicted: usize, confidence: f64) -> Vec<f64> {
    let rest = (1.0 - confidence) / (classes - 1) as f64;
    (0..classes).map(|c| if c == predicted { confidence } else { rest }).collect()
}

impl Engine for StubEngine {
    fn model_version(&self) -> &str {
        &self.version
    }

    fn class_names(&self) -> &[String] {
        &self.classes
    }

    fn num_prototypes(&self) -> usize {
        self.classes.len() * self.prototypes_per_class
    }

    fn input_size(&self) -> usize {
        STUB_INPUT_SIZE
    }

    fn classify(&self, image: &RgbImage) -> Result<Scored> {
        let (predicted, confidence) = self.lookup(image);
        let probs = scripted_probabilities(self.classes.len(), predicted, confidence);
        let logits = probs.iter().map(|p| p.ln()).collect();
        Ok(Scored::from_probabilities(logits, probs))
    }

    fn explain(&self, image: &RgbImage, image_id: &str, k: usize) -> Result<Explanation> {
        self.explain_calls.fetch_add(1, Ordering::SeqCst);
        let (predicted, confidence) = self.lookup(image);
        let p = self.num_prototypes();
        let kk = k.min(p);
        let warning = (k > p).then(|| format!("k = {k} exceeds the {p} prototypes; clamped to {p}"));
        let s = STUB_INPUT_SIZE;
        let items = (0..kk)
            .map(|j| {
                let class = j / self.prototypes_per_class;
                let w = if class == predicted { 1.0 } else { -0.5 };
                EvidenceItem {
                    prototype_id: j,
                    prototype_class: class,
                    similarity_score: 10.0 - j as f64,
                    fc_weight_to_predicted: w,
                    negative_evidence: w < 0.0,
                    test_bbox: PixelBox::full(s, s),
                    test_location: (0, 0),
                    source_image_id: format!("src{j}"),
                    source_variant: Variant::Orig,
                    source_bbox: PixelBox::full(s, s),
                    heatmap: Vec::new(),
                    native_map: Vec::new(),
                }
            })
            .collect();
        Ok(Explanation {
            image_id: image_id.into(),
            predicted_class: predicted,
            confidence,
            k: kk,
            warning,
            image_size: s,
            items,
        })
    }
}

/// Writes one flat PNG per scripted image under `dir` and indexes them.
pub fn write_catalog(dir: &Path, classes: &[&str], images: &[StubImage]) -> Result<DatasetIndex> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut entries = Vec::new();
    for (i, s) in images.iter().enumerate() {
        let path = dir.join(format!("{}.png", s.image_id));
        RgbImage::from_pixel(STUB_INPUT_SIZE as u32, STUB_INPUT_SIZE as u32, Rgb([red_of(i), 0, 0])).save(&path)?;
        entries.push(ImageEntry {
            image_id: s.image_id.clone(),
            path,
            label: s.label,
            class_name: classes[s.label].to_string(),
            instrument: Instrument::Mastcam,
            sol: i as u32,
            split: Some(Split::Test),
        });
    }
    DatasetIndex::new(entries, classes.iter().map(|c| c.to_string()).collect())
}
