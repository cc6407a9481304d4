use std::fmt;
use std::str::FromStr;

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};

use super::Instrument;
use crate::error::{Error, Result};

/// One augmentation transform applied to an original image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Orig,
    R90,
    R180,
    R270,
    Hflip,
    Vflip,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Orig => "orig",
            Variant::R90 => "r90",
            Variant::R180 => "r180",
            Variant::R270 => "r270",
            Variant::Hflip => "hflip",
            Variant::Vflip => "vflip",
        }
    }

    fn is_rotation(self) -> bool {
        matches!(self, Variant::R90 | Variant::R180 | Variant::R270)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "orig" => Variant::Orig,
            "r90" => Variant::R90,
            "r180" => Variant::R180,
            "r270" => Variant::R270,
            "hflip" => Variant::Hflip,
            "vflip" => Variant::Vflip,
            other => return Err(format!("unknown variant `{other}`")),
        })
    }
}

/// Which transforms to add next to the original image. Variants are the union
/// of the listed transforms, each applied to the original alone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationRecipe {
    rotations_deg: Vec<u16>,
    horizontal_flip: bool,
    vertical_flip: bool,
}

impl AugmentationRecipe {
    pub fn new(rotations_deg: Vec<u16>, horizontal_flip: bool, vertical_flip: bool) -> Result<Self> {
        let mut rotations = rotations_deg;
        rotations.sort_unstable();
        rotations.dedup();
        if let Some(bad) = rotations.iter().find(|r| ![90, 180, 270].contains(*r)) {
            return Err(Error::Augment(format!(
                "rotation {bad} is not one of 90, 180, 270"
            )));
        }
        Ok(Self {
            rotations_deg: rotations,
            horizontal_flip,
            vertical_flip,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotations_deg: Vec::new(),
            horizontal_flip: false,
            vertical_flip: false,
        }
    }

    /// MAHLI sits on the rotatable arm: all rotations and both flips.
    /// Mastcam is fixed: horizontal flip only. Anything else is left alone.
    pub fn for_instrument(instrument: Instrument) -> Self {
        match instrument {
            Instrument::Mahli => Self {
                rotations_deg: vec![90, 180, 270],
                horizontal_flip: true,
                vertical_flip: true,
            },
            Instrument::Mastcam => Self {
                rotations_deg: Vec::new(),
                horizontal_flip: true,
                vertical_flip: false,
            },
            Instrument::Other => Self::identity(),
        }
    }

    pub fn rotations_deg(&self) -> &[u16] {
        &self.rotations_deg
    }

    pub fn horizontal_flip(&self) -> bool {
        self.horizontal_flip
    }

    pub fn vertical_flip(&self) -> bool {
        self.vertical_flip
    }

    /// Variants in emission order, original first.
    pub fn variants(&self) -> Vec<Variant> {
        let mut out = vec![Variant::Orig];
        for r in &self.rotations_deg {
            out.push(match r {
                90 => Variant::R90,
                180 => Variant::R180,
                _ => Variant::R270,
            });
        }
        if self.horizontal_flip {
            out.push(Variant::Hflip);
        }
        if self.vertical_flip {
            out.push(Variant::Vflip);
        }
        out
    }
}

pub fn apply_variant(image: &RgbImage, variant: Variant) -> RgbImage {
    match variant {
        Variant::Orig => image.clone(),
        Variant::R90 => imageops::rotate90(image),
        Variant::R180 => imageops::rotate180(image),
        Variant::R270 => imageops::rotate270(image),
        Variant::Hflip => imageops::flip_horizontal(image),
        Variant::Vflip => imageops::flip_vertical(image),
    }
}

/// Expands one image into its recipe's variants. Rotations require a square
/// image so that every variant keeps the input's pixel dimensions.
pub fn augment(image: &RgbImage, recipe: &AugmentationRecipe) -> Result<Vec<(RgbImage, Variant)>> {
    let variants = recipe.variants();
    if image.width() != image.height() && variants.iter().any(|v| v.is_rotation()) {
        return Err(Error::Augment(format!(
            "rotation requested on a non-square {}x{} image; resize it first",
            image.width(),
            image.height()
        )));
    }
    Ok(variants
        .into_iter()
        .map(|v| (apply_variant(image, v), v))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7) as u8, (y * 13) as u8, (x ^ y) as u8]))
    }

    #[test]
    fn mastcam_two_variants() {
        let img = gradient(8, 8);
        let out = augment(&img, &AugmentationRecipe::for_instrument(Instrument::Mastcam)).unwrap();
        let tags: Vec<_> = out.iter().map(|(_, v)| *v).collect();
        assert_eq!(tags, vec![Variant::Orig, Variant::Hflip]);
    }

    #[test]
    fn mahli_six_variants() {
        let img = gradient(8, 8);
        let recipe = AugmentationRecipe::for_instrument(Instrument::Mahli);
        assert_eq!(recipe.rotations_deg(), [90, 180, 270]);
        assert!(recipe.horizontal_flip() && recipe.vertical_flip());
        let out = augment(&img, &recipe).unwrap();
        assert_eq!(out.len(), 6);
        for (variant, _) in out.iter() {
            assert_eq!(variant.dimensions(), (8, 8));
        }
    }

    #[test]
    fn mastcam_recipe_invariants() {
        let r = AugmentationRecipe::for_instrument(Instrument::Mastcam);
        assert!(r.rotations_deg().is_empty());
        assert!(!r.vertical_flip());
    }

    #[test]
    fn identity_recipe() {
        let img = gradient(5, 3);
        let out = augment(&img, &AugmentationRecipe::identity()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, img);
        assert_eq!(out[0].1, Variant::Orig);
    }

    #[test]
    fn non_square_rotation_rejected() {
        let img = gradient(6, 4);
        let err = augment(&img, &AugmentationRecipe::for_instrument(Instrument::Mahli));
        assert!(matches!(err, Err(Error::Augment(_))));
        // flips alone are fine on non-square images
        assert!(augment(&img, &AugmentationRecipe::for_instrument(Instrument::Mastcam)).is_ok());
    }

    #[test]
    fn invalid_rotation_rejected() {
        assert!(AugmentationRecipe::new(vec![45], false, false).is_err());
    }

    #[test]
    fn r90_moves_corner() {
        let img = gradient(4, 4);
        let rot = apply_variant(&img, Variant::R90);
        // clockwise: top-left goes to top-right
        assert_eq!(rot.get_pixel(3, 0), img.get_pixel(0, 0));
    }

    proptest! {
        #[test]
        fn hflip_is_an_involution(w in 1u32..12, h in 1u32..12, seed in any::<u8>()) {
            let img = RgbImage::from_fn(w, h, |x, y| Rgb([seed.wrapping_add(x as u8), (y * 3) as u8, seed ^ (x as u8)]));
            let twice = apply_variant(&apply_variant(&img, Variant::Hflip), Variant::Hflip);
            prop_assert_eq!(twice, img);
        }
    }
}
