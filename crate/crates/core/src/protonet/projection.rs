//! Prototype projection: replace each prototype with its nearest latent patch
//! among the images of its own class.

use std::cmp::Ordering;

use super::feature_map::{similarity, squared_distance, FeatureMap, Prototype, PrototypeSource};
use crate::dataset::Variant;
use crate::error::{Error, Result};
use crate::heatmap::{threshold_bbox, upsample_bilinear, DEFAULT_THRESHOLD_FRACTION};

/// One image's feature map in a projection pool.
#[derive(Clone, Debug)]
pub struct PoolImage {
    pub feature_map: FeatureMap,
    pub class_id: usize,
    pub variant: Variant,
}

#[derive(Clone, Debug)]
struct Candidate {
    distance: f64,
    image_id: String,
    variant: Variant,
    row: usize,
    col: usize,
    patch: Vec<f32>,
    bbox: crate::heatmap::PixelBox,
}

impl Candidate {
    /// Smaller distance wins; ties go to the lexically smallest `(image_id, row, col, variant)`.
    fn cmp_key(&self, distance: f64, image_id: &str, row: usize, col: usize, variant: Variant) -> Ordering {
        distance
            .total_cmp(&self.distance)
            .then_with(|| image_id.cmp(&self.image_id))
            .then_with(|| row.cmp(&self.row))
            .then_with(|| col.cmp(&self.col))
            .then_with(|| variant.cmp(&self.variant))
    }
}

/// Streaming nearest-patch search. Feed pool images with [`offer`](Self::offer)
/// in any order; the result does not depend on that order.
#[derive(Debug)]
pub struct NearestPatchSearch<'a> {
    prototypes: &'a [Prototype],
    image_size: usize,
    best: Vec<Option<Candidate>>,
}

impl<'a> NearestPatchSearch<'a> {
    /// `image_size` is the side of the square model input, used to place
    /// source boxes in pixel coordinates.
    pub fn new(prototypes: &'a [Prototype], image_size: usize) -> Self {
        Self {
            prototypes,
            image_size,
            best: vec![None; prototypes.len()],
        }
    }

    pub fn offer(&mut self, image: &PoolImage) -> Result<()> {
        let fm = &image.feature_map;
        for (j, proto) in self.prototypes.iter().enumerate() {
            if proto.class_id != image.class_id {
                continue;
            }
            if proto.vector.len() != fm.depth() {
                return Err(Error::DimensionMismatch {
                    expected: proto.vector.len(),
                    got: fm.depth(),
                });
            }
            let mut local: Option<(f64, usize, usize)> = None;
            for ((row, col), z) in fm.patches() {
                let d = squared_distance(z, &proto.vector);
                // patches() is row-major, so strict < keeps the lowest (row, col) on ties
                if local.is_none_or(|(bd, _, _)| d < bd) {
                    local = Some((d, row, col));
                }
            }
            let (d, row, col) = local.expect("feature maps are non-empty");
            let better = match &self.best[j] {
                None => true,
                Some(c) => c.cmp_key(d, fm.image_id(), row, col, image.variant) == Ordering::Less,
            };
            if better {
                let patch = fm.patch(row, col).to_vec();
                let sim = similarity(fm, &patch)?;
                let up = upsample_bilinear(&sim.map, sim.height, sim.width, self.image_size, self.image_size);
                let bbox = threshold_bbox(&up, self.image_size, self.image_size, DEFAULT_THRESHOLD_FRACTION);
                self.best[j] = Some(Candidate {
                    distance: d,
                    image_id: fm.image_id().to_string(),
                    variant: image.variant,
                    row,
                    col,
                    patch,
                    bbox,
                });
            }
        }
        Ok(())
    }

    /// Per prototype: the nearest patch and its source, or `None` when the pool
    /// held no image of that prototype's class.
    pub fn finish(self) -> Vec<Option<(Vec<f32>, PrototypeSource)>> {
        self.best
            .into_iter()
            .map(|c| {
                c.map(|c| {
                    (
                        c.patch,
                        PrototypeSource {
                            image_id: c.image_id,
                            variant: c.variant,
                            row: c.row,
                            col: c.col,
                            distance_at_projection: c.distance,
                            bbox: c.bbox,
                        },
                    )
                })
            })
            .collect()
    }
}

/// Projects every prototype onto the nearest patch of a same-class pool image.
/// Fails if some class owning prototypes has no image in the pool.
pub fn project_prototypes(prototypes: &[Prototype], pool: &[PoolImage], image_size: usize) -> Result<Vec<Prototype>> {
    let mut search = NearestPatchSearch::new(prototypes, image_size);
    for image in pool {
        search.offer(image)?;
    }
    apply_projection(prototypes, search.finish())
}

/// Writes search results back into prototypes, failing on unmatched classes.
pub fn apply_projection(
    prototypes: &[Prototype],
    found: Vec<Option<(Vec<f32>, PrototypeSource)>>,
) -> Result<Vec<Prototype>> {
    prototypes
        .iter()
        .zip(found)
        .map(|(p, hit)| match hit {
            Some((vector, source)) => Ok(Prototype {
                prototype_id: p.prototype_id,
                class_id: p.class_id,
                vector,
                source: Some(source),
            }),
            None => Err(Error::EmptyClassPool(p.class_id)),
        })
        .collect()
}

/// Nearest test patch for every prototype, without changing the prototypes.
/// Prototypes whose class is absent from the pool map to `None`.
pub fn visualize_test_prototypes(
    prototypes: &[Prototype],
    pool: &[PoolImage],
    image_size: usize,
) -> Result<Vec<Option<PrototypeSource>>> {
    let mut search = NearestPatchSearch::new(prototypes, image_size);
    for image in pool {
        search.offer(image)?;
    }
    Ok(search
        .finish()
        .into_iter()
        .map(|hit| hit.map(|(_, s)| s))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proto(id: usize, class_id: usize, v: &[f32]) -> Prototype {
        Prototype {
            prototype_id: id,
            class_id,
            vector: v.to_vec(),
            source: None,
        }
    }

    fn pool_image(id: &str, class_id: usize, patches: &[Vec<f32>]) -> PoolImage {
        PoolImage {
            feature_map: FeatureMap::from_patches(id, 1, patches.len(), patches).unwrap(),
            class_id,
            variant: Variant::Orig,
        }
    }

    #[test]
    fn projects_to_nearest_patch() {
        let protos = [proto(0, 0, &[0.0, 0.0])];
        let pool = [pool_image("a", 0, &[vec![1.0, 0.0], vec![3.0, 4.0]])];
        let out = project_prototypes(&protos, &pool, 32).unwrap();
        assert_eq!(out[0].vector, vec![1.0, 0.0]);
        let src = out[0].source.as_ref().unwrap();
        assert_eq!((src.image_id.as_str(), src.row, src.col), ("a", 0, 0));
        assert_eq!(src.distance_at_projection, 1.0);
    }

    #[test]
    fn fixed_point_and_idempotence() {
        let protos = [proto(0, 0, &[3.0, 4.0])];
        let pool = [pool_image("a", 0, &[vec![1.0, 0.0], vec![3.0, 4.0]])];
        let once = project_prototypes(&protos, &pool, 32).unwrap();
        assert_eq!(once[0].vector, vec![3.0, 4.0]);
        assert_eq!(once[0].source.as_ref().unwrap().distance_at_projection, 0.0);
        let twice = project_prototypes(&once, &pool, 32).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn restricted_to_own_class() {
        let protos = [proto(0, 1, &[0.0])];
        let pool = [pool_image("near", 0, &[vec![0.0]]), pool_image("far", 1, &[vec![9.0]])];
        let out = project_prototypes(&protos, &pool, 8).unwrap();
        assert_eq!(out[0].source.as_ref().unwrap().image_id, "far");
    }

    #[test]
    fn lexical_tie_break() {
        let protos = [proto(0, 0, &[0.0])];
        let pool = [
            pool_image("b", 0, &[vec![1.0]]),
            pool_image("a", 0, &[vec![2.0], vec![-1.0]]),
        ];
        let out = project_prototypes(&protos, &pool, 8).unwrap();
        let src = out[0].source.as_ref().unwrap();
        assert_eq!((src.image_id.as_str(), src.col), ("a", 1));
    }

    #[test]
    fn empty_class_pool_is_an_error() {
        let protos = [proto(0, 0, &[0.0]), proto(1, 1, &[0.0])];
        let pool = [pool_image("a", 0, &[vec![1.0]])];
        assert!(matches!(
            project_prototypes(&protos, &pool, 8),
            Err(Error::EmptyClassPool(1))
        ));
    }

    #[test]
    fn visualize_reports_unmatched_and_does_not_mutate() {
        let protos = [proto(0, 0, &[0.0]), proto(1, 1, &[0.0])];
        let pool = [pool_image("t", 0, &[vec![1.0], vec![0.5]])];
        let out = visualize_test_prototypes(&protos, &pool, 8).unwrap();
        assert_eq!(out[0].as_ref().unwrap().col, 1);
        assert!(out[1].is_none());
        assert_eq!(protos[0].vector, vec![0.0]);
    }

    #[test]
    fn visualize_on_train_pool_matches_projection() {
        let protos = [proto(0, 0, &[0.2, 0.1]), proto(1, 1, &[1.0, 1.0])];
        let pool = [
            pool_image("a", 0, &[vec![0.0, 0.0], vec![1.0, 1.0]]),
            pool_image("b", 1, &[vec![0.9, 1.2], vec![2.0, 0.0]]),
        ];
        let projected = project_prototypes(&protos, &pool, 8).unwrap();
        let shown = visualize_test_prototypes(&protos, &pool, 8).unwrap();
        for (p, s) in projected.iter().zip(&shown) {
            assert_eq!(p.source.as_ref(), s.as_ref());
        }
    }

    #[test]
    fn single_image_pool() {
        let protos = [proto(0, 0, &[0.0]), proto(1, 0, &[5.0])];
        let pool = [pool_image("only", 0, &[vec![1.0], vec![4.0]])];
        let shown = visualize_test_prototypes(&protos, &pool, 8).unwrap();
        assert!(shown.iter().all(|s| s.as_ref().unwrap().image_id == "only"));
        assert_eq!(shown[0].as_ref().unwrap().col, 0);
        assert_eq!(shown[1].as_ref().unwrap().col, 1);
    }
}
