//! HTTP service: gated classification, on-demand explanations, and
//! feedback capture with review export.
//!
//! | method | path | body / query | response |
//! |---|---|---|---|
//! | POST | `/classify` | `{"image_id"}` as JSON, or encoded image bytes | [`ClassifyResponse`] |
//! | GET | `/images` | [`ImagesQuery`] | [`ImagesResponse`] |
//! | GET | `/images/{image_id}/raw` | | original file |
//! | GET | `/explain/{image_id}` | `k` (default 4) | [`ExplainResponse`] |
//! | POST | `/feedback` | [`FeedbackRequest`] | 201 + [`FeedbackRecord`] |
//! | GET | `/feedback/{feedback_id}` | | [`FeedbackRecord`] |
//! | GET | `/export/review` | `model_version` (default: served) | [`ReviewExport`] |
//! | GET | `/healthz` | | [`HealthResponse`] |
//!
//! Errors are `{"error": code, "message": ..., "fields": [{field, message}]}`.

mod app;
mod catalog;
pub mod contract;
mod engine;
mod error;
mod export;
mod payload;
mod store;
pub mod testing;

pub use app::{router, serve, AppState, DEFAULT_PAGE_SIZE, MAX_COMMENT_CHARS, MAX_PAGE_SIZE};
pub use catalog::{Catalog, ImageArchive, RemoteArchive};
pub use engine::{Engine, ModelEngine, Scored};
pub use error::{ApiError, ApiResult, FieldError};
pub use export::{build_review, LabelPatch, PrototypeComplaint, ReviewExport, ReviewGroup, UnresolvedLabel, SAMPLES_PER_GROUP};
pub use payload::{
    ClassifyRequest, ClassifyResponse, EvidenceCard, ExplainQuery, ExplainResponse, ExportQuery, FeedbackRequest,
    HealthResponse, ImageSummary, ImagesQuery, ImagesResponse, Prediction,
};
pub use store::{FeedbackKind, FeedbackRecord, FeedbackStore};
