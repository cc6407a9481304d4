//! Five-column evidence panel, one row per evidence item:
//! test image with box, heatmap overlay, test crop with score bar,
//! prototype source crop, and the full source image with its box.

use image::{imageops, Rgb, RgbImage};

use super::Explanation;
use crate::dataset::Variant;
use crate::error::Result;
use crate::heatmap::{normalize_unit, PixelBox};
use crate::protonet::similarity_activation;

pub const BORDER: u32 = 3;
pub const BAR_HEIGHT: u32 = 6;
const GAP: u32 = 4;

const POSITIVE: Rgb<u8> = Rgb([40, 170, 60]);
const NEGATIVE: Rgb<u8> = Rgb([210, 40, 40]);
const BOX: Rgb<u8> = Rgb([255, 220, 0]);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PanelOptions {
    /// Heatmap opacity in the overlay column.
    pub alpha: f64,
}

impl Default for PanelOptions {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

/// Jet colour map on `[0, 1]`.
pub fn jet(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let ch = |x: f64| ((1.5 - (4.0 * v - x).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([ch(3.0), ch(2.0), ch(1.0)])
}

fn overlay(image: &RgbImage, heat: &[f64], alpha: f64) -> RgbImage {
    let norm = normalize_unit(heat);
    let mut out = image.clone();
    let w = image.width() as usize;
    for (x, y, px) in out.enumerate_pixels_mut() {
        let h = jet(norm[y as usize * w + x as usize]);
        for c in 0..3 {
            px[c] = ((1.0 - alpha) * px[c] as f64 + alpha * h[c] as f64).round() as u8;
        }
    }
    out
}

fn draw_box(img: &mut RgbImage, b: &PixelBox, colour: Rgb<u8>) {
    if b.height() == 0 || b.width() == 0 {
        return;
    }
    let (r1, c1) = (b.row1.min(img.height() as usize) - 1, b.col1.min(img.width() as usize) - 1);
    for c in b.col0..=c1 {
        img.put_pixel(c as u32, b.row0 as u32, colour);
        img.put_pixel(c as u32, r1 as u32, colour);
    }
    for r in b.row0..=r1 {
        img.put_pixel(b.col0 as u32, r as u32, colour);
        img.put_pixel(c1 as u32, r as u32, colour);
    }
}

fn crop_to(img: &RgbImage, b: &PixelBox, size: u32) -> RgbImage {
    let w = (b.width() as u32).max(1);
    let h = (b.height() as u32).max(1);
    let crop = imageops::crop_imm(img, b.col0 as u32, b.row0 as u32, w, h).to_image();
    imageops::resize(&crop, size, size, imageops::FilterType::Triangle)
}

fn paste(canvas: &mut RgbImage, tile: &RgbImage, x: u32, y: u32) {
    imageops::replace(canvas, tile, x as i64, y as i64);
}

fn fill(canvas: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, colour: Rgb<u8>) {
    for yy in y..y + h {
        for xx in x..x + w {
            canvas.put_pixel(xx, yy, colour);
        }
    }
}

/// Renders the panel for `explanation`. `test_image` must be at the
/// explanation's image size; `load_source` fetches a prototype's source image
/// (already resized and transformed by the given variant).
pub fn render_panel(
    explanation: &Explanation,
    test_image: &RgbImage,
    mut load_source: impl FnMut(&str, Variant) -> Result<RgbImage>,
    options: &PanelOptions,
) -> Result<RgbImage> {
    let s = explanation.image_size as u32;
    let cell_w = s + 2 * BORDER + GAP;
    let cell_h = s + 2 * BORDER + BAR_HEIGHT + GAP;
    let rows = explanation.items.len() as u32;
    let mut canvas = RgbImage::from_pixel(5 * cell_w + GAP, rows * cell_h + GAP, Rgb([255, 255, 255]));
    let full_score = similarity_activation(0.0);
    for (i, item) in explanation.items.iter().enumerate() {
        let y = GAP + i as u32 * cell_h;
        let frame = if item.negative_evidence { NEGATIVE } else { POSITIVE };
        let source = load_source(&item.source_image_id, item.source_variant)?;

        let mut with_box = test_image.clone();
        draw_box(&mut with_box, &item.test_bbox, BOX);
        let mut source_boxed = source.clone();
        draw_box(&mut source_boxed, &item.source_bbox, BOX);
        let tiles = [
            with_box,
            overlay(test_image, &item.heatmap, options.alpha),
            crop_to(test_image, &item.test_bbox, s),
            crop_to(&source, &item.source_bbox, s),
            source_boxed,
        ];
        for (col, tile) in tiles.iter().enumerate() {
            let x = GAP + col as u32 * cell_w;
            fill(&mut canvas, x, y, s + 2 * BORDER, s + 2 * BORDER, frame);
            paste(&mut canvas, tile, x + BORDER, y + BORDER);
        }
        // score bar under the test crop, full width at an exact match
        let bar = ((item.similarity_score / full_score).clamp(0.0, 1.0) * s as f64).round() as u32;
        let bx = GAP + 2 * cell_w + BORDER;
        let by = y + s + 2 * BORDER;
        fill(&mut canvas, bx, by, s, BAR_HEIGHT, Rgb([220, 220, 220]));
        fill(&mut canvas, bx, by, bar, BAR_HEIGHT, frame);
    }
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::EvidenceItem;

    fn explanation(k: usize, size: usize) -> Explanation {
        let item = |id: usize| EvidenceItem {
            prototype_id: id,
            prototype_class: 0,
            similarity_score: 4.0,
            fc_weight_to_predicted: if id == 1 { -0.5 } else { 1.0 },
            negative_evidence: id == 1,
            test_bbox: PixelBox { row0: 2, col0: 3, row1: 10, col1: 12 },
            test_location: (0, 0),
            source_image_id: "s".into(),
            source_variant: Variant::Orig,
            source_bbox: PixelBox::full(size, size),
            heatmap: (0..size * size).map(|v| v as f64).collect(),
            native_map: vec![4.0],
        };
        Explanation {
            image_id: "t".into(),
            predicted_class: 0,
            confidence: 0.9,
            k,
            warning: None,
            image_size: size,
            items: (0..k).map(item).collect(),
        }
    }

    fn source(_: &str, _: Variant) -> Result<RgbImage> {
        Ok(RgbImage::from_pixel(16, 16, Rgb([0, 0, 255])))
    }

    #[test]
    fn grid_shape() {
        let img = RgbImage::from_pixel(16, 16, Rgb([10, 200, 10]));
        let opts = PanelOptions::default();
        let four = render_panel(&explanation(4, 16), &img, source, &opts).unwrap();
        let one = render_panel(&explanation(1, 16), &img, source, &opts).unwrap();
        let cell_w = 16 + 2 * BORDER + GAP;
        let cell_h = 16 + 2 * BORDER + BAR_HEIGHT + GAP;
        assert_eq!(four.dimensions(), (5 * cell_w + GAP, 4 * cell_h + GAP));
        assert_eq!(one.dimensions(), (5 * cell_w + GAP, cell_h + GAP));
        // second row is negative evidence
        let y = GAP + cell_h;
        assert_eq!(*four.get_pixel(GAP, y), NEGATIVE);
        assert_eq!(*four.get_pixel(GAP, GAP), POSITIVE);
    }

    #[test]
    fn zero_alpha_overlay_is_identity() {
        let img = RgbImage::from_fn(8, 8, |x, y| Rgb([x as u8 * 20, y as u8 * 30, 7]));
        let heat: Vec<f64> = (0..64).map(|v| v as f64).collect();
        assert_eq!(overlay(&img, &heat, 0.0), img);
        assert_ne!(overlay(&img, &heat, 0.5), img);
    }

    #[test]
    fn missing_source_propagates() {
        let img = RgbImage::new(16, 16);
        let fail = |_: &str, _: Variant| -> Result<RgbImage> { Err(crate::Error::Dataset("gone".into())) };
        assert!(render_panel(&explanation(1, 16), &img, fail, &PanelOptions::default()).is_err());
    }

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), Rgb([0, 0, 128]));
        assert_eq!(jet(1.0), Rgb([128, 0, 0]));
    }
}
