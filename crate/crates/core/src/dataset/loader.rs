use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Mutex;

use candle_core::{Device, Tensor};
use image::{imageops::FilterType, RgbImage};

use super::{apply_variant, ImageEntry, Variant};
use crate::error::{Error, Result};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Decodes images and resizes them (bilinear) to the backbone's square input size.
/// Decoded images are memoised by path when caching is enabled.
#[derive(Debug)]
pub struct ImageLoader {
    input_size: u32,
    cache: Option<Mutex<HashMap<PathBuf, RgbImage>>>,
}

impl ImageLoader {
    pub fn new(input_size: usize) -> Self {
        Self {
            input_size: input_size as u32,
            cache: None,
        }
    }

    pub fn with_cache(input_size: usize) -> Self {
        Self {
            input_size: input_size as u32,
            cache: Some(Mutex::new(HashMap::new())),
        }
    }

    pub fn input_size(&self) -> usize {
        self.input_size as usize
    }

    pub fn load(&self, entry: &ImageEntry) -> Result<RgbImage> {
        if let Some(cache) = &self.cache {
            if let Some(img) = cache.lock().expect("image cache poisoned").get(&entry.path) {
                return Ok(img.clone());
            }
        }
        let bytes = std::fs::read(&entry.path).map_err(|e| Error::io(&entry.path, e))?;
        let img = self.decode(&bytes)?;
        if let Some(cache) = &self.cache {
            cache
                .lock()
                .expect("image cache poisoned")
                .insert(entry.path.clone(), img.clone());
        }
        Ok(img)
    }

    pub fn load_variant(&self, entry: &ImageEntry, variant: Variant) -> Result<RgbImage> {
        Ok(apply_variant(&self.load(entry)?, variant))
    }

    /// Decodes an encoded image (PNG/JPEG) and resizes it to the input size.
    pub fn decode(&self, bytes: &[u8]) -> Result<RgbImage> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        Ok(self.resize(&img))
    }

    pub fn resize(&self, img: &RgbImage) -> RgbImage {
        if img.width() == self.input_size && img.height() == self.input_size {
            img.clone()
        } else {
            image::imageops::resize(img, self.input_size, self.input_size, FilterType::Triangle)
        }
    }
}

/// Stacks images into a normalised `B x 3 x H x W` f32 tensor.
pub fn images_to_tensor(images: &[&RgbImage], device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Empty("image batch".into()))?;
    let (w, h) = first.dimensions();
    let plane = (w * h) as usize;
    let mut data = Vec::with_capacity(images.len() * 3 * plane);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::InputResolution {
                expected: w as usize,
                width: img.width() as usize,
                height: img.height() as usize,
            });
        }
        for c in 0..3 {
            data.extend(
                img.pixels()
                    .map(|p| (p.0[c] as f32 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]),
            );
        }
    }
    Ok(Tensor::from_vec(
        data,
        (images.len(), 3, h as usize, w as usize),
        device,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn resize_and_tensor_shape() {
        let loader = ImageLoader::new(16);
        let img = RgbImage::from_pixel(40, 30, Rgb([255, 0, 0]));
        let resized = loader.resize(&img);
        assert_eq!(resized.dimensions(), (16, 16));
        let t = images_to_tensor(&[&resized, &resized], &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 3, 16, 16]);
        let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        assert!((v[0] - (1.0 - 0.485) / 0.229).abs() < 1e-5);
    }

    #[test]
    fn undecodable_bytes() {
        let loader = ImageLoader::new(8);
        assert!(loader.decode(b"not an image").is_err());
    }
}
