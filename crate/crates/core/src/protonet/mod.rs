//! The prototype network: backbone, prototype layer and evidence layer.

mod backbone;
pub mod checkpoint;
mod feature_map;
mod model;
mod params;
mod projection;

pub use backbone::BackboneKind;
pub use checkpoint::{load_checkpoint, model_version, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT_VERSION};
pub use feature_map::{
    logits_from_scores, similarity, similarity_activation, similarity_scores, squared_distance, FeatureMap,
    Prototype, PrototypeSource, SimilarityResult, SIMILARITY_EPSILON,
};
pub use model::{
    feature_maps_from_tensor, patch_distances, similarity_tensor, Forward, ForwardOutput, ModelConfig,
    ModelSnapshot, ProtoNet, DEFAULT_PROTOTYPES_PER_CLASS, DEFAULT_PROTOTYPE_DIM, IN_CLASS_WEIGHT,
    OUT_CLASS_WEIGHT,
};
pub use params::ParamGroup;
pub use projection::{apply_projection, project_prototypes, visualize_test_prototypes, NearestPatchSearch, PoolImage};
