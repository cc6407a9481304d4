//! Small synthetic "coloured shapes" dataset used for desk-scale runs.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{load_manifest, write_manifest, DatasetIndex, ImageEntry, Instrument};
use crate::error::{Error, Result};

pub const SHAPE_CLASSES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Clone, Debug)]
pub struct ShapesConfig {
    pub num_images: usize,
    pub image_size: u32,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            num_images: 50,
            image_size: 32,
            seed: 7,
        }
    }
}

fn inside(class: usize, dx: f32, dy: f32, r: f32) -> bool {
    match class {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        _ => {
            // upward triangle with apex at -r and base at +0.8r
            let t = (dy + r) / (1.8 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * r
        }
    }
}

/// Per-class base colour; each image jitters it.
const CLASS_COLOURS: [[u8; 3]; 3] = [[220, 80, 60], [80, 200, 90], [90, 110, 230]];

/// Renders one image of `class` (index into [`SHAPE_CLASSES`]).
pub fn render_shape(class: usize, size: u32, rng: &mut impl Rng) -> RgbImage {
    let s = size as f32;
    let r = rng.random_range(0.22 * s..0.34 * s);
    let cx = rng.random_range(r..s - r);
    let cy = rng.random_range(r..s - r);
    let base = CLASS_COLOURS[class % CLASS_COLOURS.len()];
    let color = base.map(|c| (c as i16 + rng.random_range(-40..=40i16)).clamp(0, 255) as u8);
    let mut img = RgbImage::new(size, size);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let dx = x as f32 + 0.5 - cx;
        let dy = y as f32 + 0.5 - cy;
        *px = if inside(class, dx, dy, r) {
            Rgb(color)
        } else {
            let n = rng.random_range(0..40u8);
            Rgb([n, n, n.saturating_add(10)])
        };
    }
    img
}

/// Writes `images/*.png`, `manifest.csv` and `classes.txt` under `dir` and
/// returns the loaded index. Image `i` has class `i % 3`, sol `i + 1` and
/// alternates between the Mastcam and MAHLI instruments.
pub fn write_shapes_dataset(dir: impl AsRef<Path>, config: &ShapesConfig) -> Result<DatasetIndex> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut entries = Vec::with_capacity(config.num_images);
    for i in 0..config.num_images {
        let class = i % SHAPE_CLASSES.len();
        let img = render_shape(class, config.image_size, &mut rng);
        let image_id = format!("shape_{i:04}");
        let path = images.join(format!("{image_id}.png"));
        img.save(&path)?;
        entries.push(ImageEntry {
            image_id,
            path,
            label: class,
            class_name: SHAPE_CLASSES[class].to_string(),
            instrument: if i % 2 == 0 {
                Instrument::Mastcam
            } else {
                Instrument::Mahli
            },
            sol: i as u32 + 1,
            split: None,
        });
    }
    let index = DatasetIndex::new(
        entries,
        SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
    )?;
    let manifest = dir.join("manifest.csv");
    write_manifest(&index, &manifest)?;
    load_manifest(&manifest)
}
