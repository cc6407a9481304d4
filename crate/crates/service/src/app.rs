use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::RgbImage;
use parking_lot::{Mutex, RwLock};
use protomsl::calibrate::DEFAULT_CONFIDENCE_THRESHOLD;
use protomsl::explain::DEFAULT_K;
use serde::de::DeserializeOwned;

use crate::catalog::Catalog;
use crate::engine::{Engine, Scored};
use crate::error::{ApiError, ApiResult, FieldError};
use crate::export::{build_review, ReviewExport};
use crate::payload::{
    ClassifyRequest, ClassifyResponse, ExplainQuery, ExplainResponse, ExportQuery, FeedbackRequest, HealthResponse,
    ImageSummary, ImagesQuery, ImagesResponse, Prediction,
};
use crate::store::{FeedbackKind, FeedbackRecord, FeedbackStore};

pub const DEFAULT_PAGE_SIZE: usize = 100;
pub const MAX_PAGE_SIZE: usize = 1000;
pub const MAX_COMMENT_CHARS: usize = 2000;
const MAX_UPLOAD_BYTES: usize = 32 * 1024 * 1024;

type ExplainKey = (String, String, usize);

/// Shared server state. The engine is an immutable snapshot replaced
/// atomically by [`AppState::swap_engine`].
pub struct AppState {
    engine: RwLock<Arc<dyn Engine>>,
    catalog: Arc<Catalog>,
    store: Arc<FeedbackStore>,
    threshold: f64,
    explanations: Mutex<HashMap<ExplainKey, Bytes>>,
    predictions: Mutex<HashMap<(String, String), Scored>>,
    ui_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(engine: Arc<dyn Engine>, catalog: Catalog, store: FeedbackStore) -> Self {
        Self {
            engine: RwLock::new(engine),
            catalog: Arc::new(catalog),
            store: Arc::new(store),
            threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            explanations: Mutex::new(HashMap::new()),
            predictions: Mutex::new(HashMap::new()),
            ui_dir: None,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    /// Serves a built UI bundle under `/ui`.
    pub fn with_ui_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.ui_dir = Some(dir.into());
        self
    }

    pub fn engine(&self) -> Arc<dyn Engine> {
        self.engine.read().clone()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn store(&self) -> &FeedbackStore {
        &self.store
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    /// Replaces the model; cached results of the old version are dropped.
    pub fn swap_engine(&self, engine: Arc<dyn Engine>) {
        let version = engine.model_version().to_string();
        *self.engine.write() = engine;
        self.explanations.lock().retain(|k, _| k.1 == version);
        self.predictions.lock().retain(|k, _| k.0 == version);
    }

    pub fn cached_explanations(&self) -> usize {
        self.explanations.lock().len()
    }

    fn scored(&self, engine: &dyn Engine, image_id: &str) -> ApiResult<Scored> {
        let key = (engine.model_version().to_string(), image_id.to_string());
        if let Some(s) = self.predictions.lock().get(&key) {
            return Ok(s.clone());
        }
        let image = self.catalog.image(image_id)?;
        let s = engine.classify(&image)?;
        self.predictions.lock().insert(key, s.clone());
        Ok(s)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let mut app = Router::new()
        .route("/healthz", get(healthz))
        .route("/classify", post(classify))
        .route("/images", get(images))
        .route("/images/{image_id}/raw", get(raw_image))
        .route("/explain/{image_id}", get(explain))
        .route("/feedback", post(feedback))
        .route("/feedback/{feedback_id}", get(get_feedback))
        .route("/export/review", get(export_review))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES));
    if let Some(dir) = &state.ui_dir {
        app = app.nest_service("/ui", tower_http::services::ServeDir::new(dir));
    }
    app.with_state(state)
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    q.map(|Query(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn json_bytes(bytes: Bytes, status: StatusCode) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    let engine = state.engine();
    Json(HealthResponse {
        status: "ok".into(),
        model_version: engine.model_version().to_string(),
        classes: engine.class_names().to_vec(),
        prototypes: engine.num_prototypes(),
        threshold: state.threshold,
    })
}

/// Body is either `{"image_id": ...}` with a JSON content type, or the
/// encoded image itself.
async fn classify(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<ClassifyResponse>> {
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    let engine = state.engine();
    let st = state.clone();
    let eng = engine.clone();
    let (image_id, scored) = blocking(move || {
        if is_json {
            let req: ClassifyRequest = parse_json(&body)?;
            let s = st.scored(eng.as_ref(), &req.image_id)?;
            Ok((Some(req.image_id), s))
        } else {
            if body.is_empty() {
                return Err(ApiError::bad_request("empty body; send an image or {\"image_id\": ...}"));
            }
            let img: RgbImage = st.catalog.decode(&body)?;
            Ok((None, eng.classify(&img)?))
        }
    })
    .await?;
    Ok(Json(ClassifyResponse {
        image_id,
        model_version: engine.model_version().to_string(),
        threshold: state.threshold,
        prediction: Prediction::gate(&scored, engine.class_names(), state.threshold),
    }))
}

/// Lists catalog images with their gated predictions. Class and confidence
/// filters select delivered predictions; abstained images appear only with
/// `include_abstained=true` and no class filter.
async fn images(
    State(state): State<Arc<AppState>>,
    q: Result<Query<ImagesQuery>, QueryRejection>,
) -> ApiResult<Json<ImagesResponse>> {
    let q = query(q)?;
    let limit = q.limit.unwrap_or(DEFAULT_PAGE_SIZE);
    if limit == 0 || limit > MAX_PAGE_SIZE {
        return Err(ApiError::bad_request(format!("limit must be in 1..={MAX_PAGE_SIZE}")));
    }
    let engine = state.engine();
    let class_id = match &q.class {
        Some(name) => Some(
            engine
                .class_names()
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| ApiError::bad_request(format!("unknown class `{name}`")))?,
        ),
        None => None,
    };
    let st = state.clone();
    let eng = engine.clone();
    let threshold = state.threshold;
    let (total, items) = blocking(move || {
        let mut matched = Vec::new();
        for entry in st.catalog.index().entries() {
            if q.split.is_some() && entry.split != q.split {
                continue;
            }
            let scored = st.scored(eng.as_ref(), &entry.image_id)?;
            let prediction = Prediction::gate(&scored, eng.class_names(), threshold);
            let keep = if prediction.abstained {
                q.include_abstained && class_id.is_none()
            } else {
                class_id.is_none_or(|c| c == scored.predicted)
                    && q.min_confidence.is_none_or(|m| scored.confidence >= m)
                    && q.max_confidence.is_none_or(|m| scored.confidence <= m)
            };
            if keep {
                matched.push(ImageSummary {
                    image_id: entry.image_id.clone(),
                    instrument: entry.instrument,
                    sol: entry.sol,
                    split: entry.split,
                    prediction,
                });
            }
        }
        let total = matched.len();
        Ok((total, matched.into_iter().skip(q.offset).take(limit).collect::<Vec<_>>()))
    })
    .await?;
    Ok(Json(ImagesResponse {
        model_version: engine.model_version().to_string(),
        total,
        offset: q.offset,
        items,
    }))
}

async fn raw_image(State(state): State<Arc<AppState>>, Path(image_id): Path<String>) -> ApiResult<Response> {
    let entry = state.catalog.entry(&image_id)?;
    let mime = match entry.path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    };
    let bytes = state.catalog.raw(&image_id)?;
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

async fn explain(
    State(state): State<Arc<AppState>>,
    Path(image_id): Path<String>,
    q: Result<Query<ExplainQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let k = query(q)?.k.unwrap_or(DEFAULT_K);
    if k == 0 {
        return Err(ApiError::bad_request("k must be at least 1"));
    }
    state.catalog.entry(&image_id)?;
    let engine = state.engine();
    let key = (image_id.clone(), engine.model_version().to_string(), k);
    if let Some(bytes) = state.explanations.lock().get(&key) {
        return Ok(json_bytes(bytes.clone(), StatusCode::OK));
    }
    let st = state.clone();
    let bytes = blocking(move || {
        let image = st.catalog.image(&image_id)?;
        let e = engine.explain(&image, &image_id, k)?;
        let body = ExplainResponse::new(&e, engine.model_version(), engine.class_names(), st.threshold);
        serde_json::to_vec(&body)
            .map(Bytes::from)
            .map_err(|e| ApiError::internal(e.to_string()))
    })
    .await?;
    // A concurrent request may have filled the slot first; keep whichever landed first.
    let bytes = state.explanations.lock().entry(key).or_insert(bytes).clone();
    Ok(json_bytes(bytes, StatusCode::OK))
}

fn validate_feedback(req: &FeedbackRequest, engine: &dyn Engine, catalog: &Catalog) -> ApiResult<FeedbackKind> {
    let mut fields = Vec::new();
    if catalog.entry(&req.image_id).is_err() {
        fields.push(FieldError::new("image_id", format!("unknown image `{}`", req.image_id)));
    }
    if let Some(v) = &req.model_version {
        if v != engine.model_version() {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "stale_model_version",
                format!("feedback targets model {v} but {} is being served", engine.model_version()),
            ));
        }
    }
    let kind = match req.kind.to_ascii_lowercase().as_str() {
        "wrong_label" => Some(FeedbackKind::WrongLabel),
        "wrong_evidence" => Some(FeedbackKind::WrongEvidence),
        _ => {
            fields.push(FieldError::new("kind", "must be `wrong_label` or `wrong_evidence`"));
            None
        }
    };
    let classes = engine.class_names().len();
    let prototypes = engine.num_prototypes();
    match kind {
        Some(FeedbackKind::WrongLabel) => {
            match req.suggested_label {
                None => fields.push(FieldError::new("suggested_label", "required for wrong_label")),
                Some(l) if l >= classes => {
                    fields.push(FieldError::new("suggested_label", format!("must be below {classes}")))
                }
                _ => {}
            }
            if req.prototype_id.is_some() {
                fields.push(FieldError::new("prototype_id", "not allowed for wrong_label"));
            }
        }
        Some(FeedbackKind::WrongEvidence) => {
            match req.prototype_id {
                None => fields.push(FieldError::new("prototype_id", "required for wrong_evidence")),
                Some(p) if p >= prototypes => {
                    fields.push(FieldError::new("prototype_id", format!("must be below {prototypes}")))
                }
                _ => {}
            }
            if req.suggested_label.is_some() {
                fields.push(FieldError::new("suggested_label", "not allowed for wrong_evidence"));
            }
        }
        None => {}
    }
    if req.comment.as_ref().is_some_and(|c| c.chars().count() > MAX_COMMENT_CHARS) {
        fields.push(FieldError::new("comment", format!("at most {MAX_COMMENT_CHARS} characters")));
    }
    match kind {
        Some(k) if fields.is_empty() => Ok(k),
        _ => Err(ApiError::validation(fields)),
    }
}

async fn feedback(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: FeedbackRequest = parse_json(&body)?;
    let engine = state.engine();
    let kind = validate_feedback(&req, engine.as_ref(), &state.catalog)?;
    let image_class = state.catalog.entry(&req.image_id)?.label;
    let record = FeedbackRecord {
        feedback_id: uuid::Uuid::new_v4().to_string(),
        image_id: req.image_id,
        kind,
        suggested_label: req.suggested_label,
        prototype_id: req.prototype_id,
        comment: req.comment,
        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true),
        model_version: engine.model_version().to_string(),
        image_class,
    };
    let store = state.store.clone();
    let record = blocking(move || {
        store.insert(&record)?;
        Ok(record)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn get_feedback(
    State(state): State<Arc<AppState>>,
    Path(feedback_id): Path<String>,
) -> ApiResult<Json<FeedbackRecord>> {
    let store = state.store.clone();
    let id = feedback_id.clone();
    blocking(move || Ok(store.get(&id)?))
        .await?
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown feedback_id `{feedback_id}`")))
}

/// Review export for `model_version`, defaulting to the served model.
async fn export_review(
    State(state): State<Arc<AppState>>,
    q: Result<Query<ExportQuery>, QueryRejection>,
) -> ApiResult<Json<ReviewExport>> {
    let engine = state.engine();
    let version = query(q)?
        .model_version
        .unwrap_or_else(|| engine.model_version().to_string());
    let store = state.store.clone();
    let names = engine.class_names().to_vec();
    blocking(move || {
        let records = store.list(&version)?;
        Ok(Json(build_review(&version, &records, &names)))
    })
    .await
}
