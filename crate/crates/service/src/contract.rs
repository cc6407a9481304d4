//! HTTP contract checks run against a stub engine over an in-process router.
//! Each check returns `Err(reason)` on the first violated expectation.

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::{to_bytes, Body, Bytes};
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use crate::app::{router, AppState};
use crate::catalog::Catalog;
use crate::store::FeedbackStore;
use crate::testing::{write_catalog, StubEngine, StubImage, STUB_INPUT_SIZE};

pub type CheckResult = Result<(), String>;

pub const CLASSES: [&str; 3] = ["Sun", "Drill", "Wheel"];
pub const PROTOTYPES_PER_CLASS: usize = 2;
pub const SOAK_REQUESTS: usize = 100;

/// Keys that name or score a class and so must never appear for an abstained prediction.
const CLASS_KEYS: [&str; 6] = ["class_id", "class_name", "confidence", "predicted_class", "fc_weight", "negative_evidence"];

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

pub fn images() -> Vec<StubImage> {
    vec![
        StubImage::new("sure", 0, 0, 0.95),
        StubImage::new("edge", 1, 1, 0.90),
        StubImage::new("below", 2, 2, 0.89),
        StubImage::new("low", 0, 1, 0.40),
        StubImage::new("wheel", 2, 2, 0.99),
    ]
}

pub struct Fixture {
    pub state: Arc<AppState>,
    pub app: Router,
    pub engine: Arc<StubEngine>,
    dir: PathBuf,
}

impl Drop for Fixture {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.dir);
    }
}

impl Fixture {
    pub fn new(version: &str) -> Result<Self, String> {
        let dir = std::env::temp_dir().join(format!("protomsl-contract-{}", uuid::Uuid::new_v4()));
        let imgs = images();
        let index = write_catalog(&dir, &CLASSES, &imgs).map_err(|e| e.to_string())?;
        let engine = Arc::new(StubEngine::new(version, &CLASSES, PROTOTYPES_PER_CLASS, &imgs));
        let store = FeedbackStore::open(dir.join("feedback.sqlite")).map_err(|e| e.to_string())?;
        let state = Arc::new(AppState::new(engine.clone(), Catalog::new(index, STUB_INPUT_SIZE), store));
        let app = router(state.clone());
        Ok(Self { state, app, engine, dir })
    }

    pub async fn send(&self, method: Method, uri: &str, content_type: Option<&str>, body: Vec<u8>) -> (StatusCode, Bytes) {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(ct) = content_type {
            req = req.header(header::CONTENT_TYPE, ct);
        }
        let resp = self
            .app
            .clone()
            .oneshot(req.body(Body::from(body)).expect("request"))
            .await
            .expect("infallible router");
        let status = resp.status();
        (status, to_bytes(resp.into_body(), usize::MAX).await.expect("body"))
    }

    pub async fn get(&self, uri: &str) -> (StatusCode, Value) {
        let (s, b) = self.send(Method::GET, uri, None, Vec::new()).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    pub async fn post_json(&self, uri: &str, body: &Value) -> (StatusCode, Value) {
        let (s, b) = self
            .send(Method::POST, uri, Some("application/json"), body.to_string().into_bytes())
            .await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }
}

fn find_class_key(v: &Value) -> Option<String> {
    match v {
        Value::Object(m) => m.iter().find_map(|(k, v)| {
            if CLASS_KEYS.contains(&k.as_str()) {
                Some(k.clone())
            } else {
                find_class_key(v)
            }
        }),
        Value::Array(a) => a.iter().find_map(find_class_key),
        _ => None,
    }
}

/// 0.95 and exactly 0.90 are delivered; 0.89 abstains.
pub async fn threshold_inclusive() -> CheckResult {
    let f = Fixture::new("v1")?;
    for (id, delivered, class) in [("sure", true, "Sun"), ("edge", true, "Drill"), ("below", false, "")] {
        let (s, v) = f.post_json("/classify", &json!({ "image_id": id })).await;
        ensure!(s == StatusCode::OK, "classify {id}: status {s}");
        ensure!(v["abstained"] == json!(!delivered), "classify {id}: abstained = {}", v["abstained"]);
        if delivered {
            ensure!(v["class_name"] == json!(class), "classify {id}: class {}", v["class_name"]);
            ensure!(v["confidence"].as_f64().is_some(), "classify {id}: confidence missing");
        }
    }
    let (_, edge) = f.post_json("/classify", &json!({ "image_id": "edge" })).await;
    ensure!(edge["confidence"] == json!(0.9), "edge confidence {}", edge["confidence"]);
    let bytes = std::fs::read(&f.state.catalog().entry("edge").map_err(|e| e.message.clone())?.path)
        .map_err(|e| e.to_string())?;
    let (s, b) = f.send(Method::POST, "/classify", Some("image/png"), bytes).await;
    let v: Value = serde_json::from_slice(&b).map_err(|e| e.to_string())?;
    ensure!(s == StatusCode::OK && v["abstained"] == json!(false), "uploaded 0.90 image: {s} {v}");
    let (s, v) = f.send(Method::POST, "/classify", Some("image/png"), b"not an image".to_vec()).await;
    ensure!(s.is_client_error(), "undecodable upload gave {s} {v:?}");
    Ok(())
}

/// No payload carries a class or a score for an abstained prediction.
pub async fn abstained_payloads_class_free() -> CheckResult {
    let f = Fixture::new("v1")?;
    for id in ["below", "low"] {
        let (_, v) = f.post_json("/classify", &json!({ "image_id": id })).await;
        ensure!(v["abstained"] == json!(true), "{id} should abstain");
        ensure!(find_class_key(&v).is_none(), "classify {id} leaks {:?}: {v}", find_class_key(&v));
        let (s, v) = f.get(&format!("/explain/{id}?k=4")).await;
        ensure!(s == StatusCode::OK, "explain {id}: {s}");
        ensure!(v["abstained"] == json!(true), "explain {id} not marked abstained");
        ensure!(find_class_key(&v).is_none(), "explain {id} leaks {:?}: {v}", find_class_key(&v));
    }
    let (_, v) = f.get("/images").await;
    let ids: Vec<&str> = v["items"].as_array().into_iter().flatten().filter_map(|i| i["image_id"].as_str()).collect();
    ensure!(ids == ["sure", "edge", "wheel"], "default listing {ids:?}");
    let (_, v) = f.get("/images?include_abstained=true").await;
    ensure!(v["total"] == json!(5), "listing with abstained: {}", v["total"]);
    for item in v["items"].as_array().into_iter().flatten() {
        if item["prediction"]["abstained"] == json!(true) {
            ensure!(find_class_key(item).is_none(), "listing leaks class for {}", item["image_id"]);
        }
    }
    let (_, v) = f.get("/images?class=Wheel&include_abstained=true").await;
    ensure!(v["total"] == json!(1), "class filter returned {}", v["total"]);
    let (_, v) = f.get("/images?min_confidence=0.9&max_confidence=0.92").await;
    ensure!(v["items"][0]["image_id"] == json!("edge") && v["total"] == json!(1), "confidence filter {v}");
    Ok(())
}

/// Field constraints are enforced, accepted records round-trip by id and through export.
pub async fn feedback_invariants() -> CheckResult {
    let f = Fixture::new("v1")?;
    let rejected = [
        (json!({"image_id": "sure", "kind": "wrong_evidence"}), "prototype_id"),
        (json!({"image_id": "sure", "kind": "wrong_label"}), "suggested_label"),
        (json!({"image_id": "sure", "kind": "wrong_label", "suggested_label": 3}), "suggested_label"),
        (json!({"image_id": "sure", "kind": "wrong_evidence", "prototype_id": 6}), "prototype_id"),
        (json!({"image_id": "sure", "kind": "wrong_label", "suggested_label": 1, "prototype_id": 0}), "prototype_id"),
        (json!({"image_id": "nope", "kind": "wrong_label", "suggested_label": 1}), "image_id"),
        (json!({"image_id": "sure", "kind": "meh"}), "kind"),
    ];
    for (body, field) in &rejected {
        let (s, v) = f.post_json("/feedback", body).await;
        ensure!(s == StatusCode::UNPROCESSABLE_ENTITY, "{body} gave {s}");
        let fields: Vec<&str> = v["fields"].as_array().into_iter().flatten().filter_map(|e| e["field"].as_str()).collect();
        ensure!(fields.contains(field), "{body}: expected field error on {field}, got {fields:?}");
    }
    let (s, _) = f
        .post_json("/feedback", &json!({"image_id": "sure", "kind": "wrong_label", "suggested_label": 1, "model_version": "v0"}))
        .await;
    ensure!(s == StatusCode::CONFLICT, "stale model version gave {s}");
    ensure!(f.state.store().count().map_err(|e| e.to_string())? == 0, "rejected feedback was stored");

    let accepted = [
        json!({"image_id": "sure", "kind": "wrong_label", "suggested_label": 2, "comment": "rock"}),
        json!({"image_id": "edge", "kind": "wrong_evidence", "prototype_id": 3}),
        json!({"image_id": "edge", "kind": "WRONG_EVIDENCE", "prototype_id": 5, "model_version": "v1"}),
    ];
    let mut stored = Vec::new();
    for body in &accepted {
        let (s, v) = f.post_json("/feedback", body).await;
        ensure!(s == StatusCode::CREATED, "{body} gave {s}: {v}");
        ensure!(v["model_version"] == json!("v1"), "server did not stamp model_version");
        ensure!(v["created_at"].as_str().is_some_and(|t| !t.is_empty()), "no timestamp");
        let (s, back) = f.get(&format!("/feedback/{}", v["feedback_id"].as_str().unwrap_or(""))).await;
        ensure!(s == StatusCode::OK && back == v, "round trip by id differs: {back} vs {v}");
        stored.push(v);
    }
    let (s, export) = f.get("/export/review").await;
    ensure!(s == StatusCode::OK, "export status {s}");
    ensure!(export["total"] == json!(3) && export["empty"] == json!(false), "export totals {export}");
    let sum: u64 = export["groups"].as_array().into_iter().flatten().filter_map(|g| g["count"].as_u64()).sum();
    ensure!(sum == 3, "group counts sum to {sum}");
    for r in &stored {
        let hit = export["groups"].as_array().into_iter().flatten().any(|g| {
            g["kind"] == r["kind"]
                && g["prototype_id"] == r["prototype_id"]
                && g["class_id"] == r["image_class"]
                && g["sample_images"].as_array().is_some_and(|s| s.contains(&r["image_id"]))
        });
        ensure!(hit, "record {} missing from export", r["feedback_id"]);
    }
    ensure!(export["label_patch"][0]["suggested_label"] == json!(2), "label patch {}", export["label_patch"]);
    let (_, other) = f.get("/export/review?model_version=v9").await;
    ensure!(other["empty"] == json!(true) && other["total"] == json!(0), "foreign version export {other}");
    Ok(())
}

/// Concurrent submissions all commit with distinct ids.
pub async fn concurrent_feedback_soak() -> CheckResult {
    let f = Arc::new(Fixture::new("v1")?);
    let mut tasks = Vec::new();
    for i in 0..SOAK_REQUESTS {
        let f = f.clone();
        tasks.push(tokio::spawn(async move {
            let body = if i % 2 == 0 {
                json!({"image_id": "sure", "kind": "wrong_label", "suggested_label": i % 3, "comment": format!("#{i}")})
            } else {
                json!({"image_id": "wheel", "kind": "wrong_evidence", "prototype_id": i % 6})
            };
            f.post_json("/feedback", &body).await
        }));
    }
    let mut ids = HashSet::new();
    for t in tasks {
        let (s, v) = t.await.map_err(|e| e.to_string())?;
        ensure!(s == StatusCode::CREATED, "submission failed with {s}: {v}");
        ids.insert(v["feedback_id"].as_str().unwrap_or_default().to_string());
    }
    ensure!(ids.len() == SOAK_REQUESTS, "{} distinct ids", ids.len());
    let listed = f.state.store().list("v1").map_err(|e| e.to_string())?;
    ensure!(listed.len() == SOAK_REQUESTS, "{} rows stored", listed.len());
    let stored: HashSet<String> = listed.into_iter().map(|r| r.feedback_id).collect();
    ensure!(stored == ids, "stored ids differ from acknowledged ids");
    let (_, export) = f.get("/export/review").await;
    ensure!(export["total"] == json!(SOAK_REQUESTS), "export total {}", export["total"]);
    Ok(())
}

/// Repeat requests are byte-identical cache hits; a model swap never sees old entries.
pub async fn explanation_cache() -> CheckResult {
    let f = Fixture::new("v1")?;
    let (s1, b1) = f.send(Method::GET, "/explain/sure?k=4", None, Vec::new()).await;
    let (s2, b2) = f.send(Method::GET, "/explain/sure?k=4", None, Vec::new()).await;
    ensure!(s1 == StatusCode::OK && s2 == StatusCode::OK, "explain status {s1} {s2}");
    ensure!(b1 == b2, "second response differs");
    ensure!(f.engine.explain_calls() == 1, "engine ran {} times", f.engine.explain_calls());
    let v: Value = serde_json::from_slice(&b1).map_err(|e| e.to_string())?;
    ensure!(v["items"].as_array().map(Vec::len) == Some(4), "k=4 gave {}", v["items"]);
    ensure!(v["warning"].is_null(), "unexpected warning");

    let (_, v) = f.get("/explain/sure?k=1000").await;
    let p = CLASSES.len() * PROTOTYPES_PER_CLASS;
    ensure!(v["items"].as_array().map(Vec::len) == Some(p) && v["k"] == json!(p), "clamp gave {}", v["k"]);
    ensure!(v["warning"].as_str().is_some(), "clamp without warning");

    let imgs = images();
    let v2 = Arc::new(StubEngine::new("v2", &CLASSES, PROTOTYPES_PER_CLASS, &imgs));
    f.state.swap_engine(v2.clone());
    let (_, b3) = f.send(Method::GET, "/explain/sure?k=4", None, Vec::new()).await;
    ensure!(v2.explain_calls() == 1, "new model served a cached explanation");
    let v: Value = serde_json::from_slice(&b3).map_err(|e| e.to_string())?;
    ensure!(v["model_version"] == json!("v2"), "served version {}", v["model_version"]);
    ensure!(f.state.cached_explanations() == 1, "old-version entries survived the swap");

    let (s, _) = f.get("/explain/nope").await;
    ensure!(s == StatusCode::NOT_FOUND, "unknown image gave {s}");
    let (s, _) = f.get("/explain/sure?k=0").await;
    ensure!(s == StatusCode::BAD_REQUEST, "k=0 gave {s}");
    let (_, h) = f.get("/healthz").await;
    ensure!(h["model_version"] == json!(f.state.engine().model_version()), "healthz version {h}");
    Ok(())
}

/// Majority vote fills the label patch; a tie is flagged and left out.
pub async fn export_majority_and_tie() -> CheckResult {
    let f = Fixture::new("v1")?;
    for (image, label) in [("low", 1), ("low", 1), ("low", 0), ("edge", 0), ("edge", 2)] {
        let (s, _) = f
            .post_json("/feedback", &json!({"image_id": image, "kind": "wrong_label", "suggested_label": label}))
            .await;
        ensure!(s == StatusCode::CREATED, "submission gave {s}");
    }
    let (_, e) = f.get("/export/review?model_version=v1").await;
    ensure!(
        e["label_patch"] == json!([{"image_id": "low", "suggested_label": 1, "votes": 2, "total_votes": 3}]),
        "label patch {}",
        e["label_patch"]
    );
    ensure!(
        e["unresolved"] == json!([{"image_id": "edge", "tied_labels": [0, 2], "votes": 1}]),
        "unresolved {}",
        e["unresolved"]
    );
    Ok(())
}

pub const CHECKS: [&str; 6] = [
    "threshold inclusive at 0.90",
    "abstained payloads class-free",
    "feedback invariants enforced",
    "100-way concurrent feedback soak",
    "explanation cache keyed by model_version",
    "export majority vote and tie flag",
];

/// Runs every check; one `(name, result)` per entry of [`CHECKS`].
pub async fn run_all() -> Vec<(&'static str, CheckResult)> {
    vec![
        (CHECKS[0], threshold_inclusive().await),
        (CHECKS[1], abstained_payloads_class_free().await),
        (CHECKS[2], feedback_invariants().await),
        (CHECKS[3], concurrent_feedback_soak().await),
        (CHECKS[4], explanation_cache().await),
        (CHECKS[5], export_majority_and_tie().await),
    ]
}
