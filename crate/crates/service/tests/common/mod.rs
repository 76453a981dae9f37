#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use datr_core::data::{generate_synthetic_corpus, Corpus, SyntheticSpec};
use datr_core::model::{Datr, ModelConfig};
use datr_core::retrieval::EmbeddingIndex;
use datr_core::training::{build_vocab, train_stage1, train_stage2, TrainConfig};
use datr_service::api::{router, AppState, Snapshot};
use datr_service::config::ServiceConfig;
use serde_json::Value;
use tower::ServiceExt;

pub fn small_corpus() -> Corpus {
    let spec = SyntheticSpec {
        n_topics: 4,
        details_per_topic: 3,
        videos_per_detail: 2,
        d_in: 8,
        n_frames: 8,
        seed: 5,
        ..SyntheticSpec::default()
    };
    generate_synthetic_corpus(&spec).unwrap().corpus
}

/// Briefly trained model over `small_corpus`, indexed on every video.
pub fn small_snapshot() -> Snapshot {
    let corpus = small_corpus();
    let config = ModelConfig {
        d: 16,
        layers: 2,
        heads: 2,
        n_frames: 8,
        d_in: 8,
        text_layers: 1,
        max_tokens: 12,
        ..ModelConfig::default()
    };
    let mut model = Datr::new(config, build_vocab(&corpus), 1).unwrap();
    let stage1 = TrainConfig {
        epochs: 3,
        batch_size: 8,
        ..TrainConfig::default()
    };
    train_stage1(&mut model, &corpus, None, &stage1).unwrap();
    let stage2 = TrainConfig {
        epochs: 5,
        batch_size: 8,
        hard_negatives: 3,
        negative_pool: 10,
        ..TrainConfig::stage2()
    };
    train_stage2(&mut model, &corpus, &stage2).unwrap();
    let index = EmbeddingIndex::build(corpus.videos(), &model).unwrap();
    Snapshot::new(model, index, Some(&corpus)).unwrap()
}

pub fn service_config() -> ServiceConfig {
    ServiceConfig {
        k: 12,
        m: 5,
        ..ServiceConfig::default()
    }
}

pub fn app_with(config: ServiceConfig, snapshot: Option<Snapshot>) -> (Arc<AppState>, Router) {
    let state = AppState::new(config, snapshot);
    let app = router(state.clone());
    (state, app)
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let mut request = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(text) => {
            request = request.header("content-type", "application/json");
            Body::from(text.to_owned())
        }
        None => Body::empty(),
    };
    let response = app.clone().oneshot(request.body(body).unwrap()).await.unwrap();
    let status = response.status();
    let bytes = axum::body::to_bytes(response.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

pub async fn new_session(app: &Router) -> String {
    let (status, body) = call(app, Method::POST, "/v1/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["session_id"].as_str().unwrap().to_owned()
}

pub async fn turn(app: &Router, session: &str, request: &Value) -> (StatusCode, Value) {
    let uri = format!("/v1/sessions/{session}/turns");
    call(app, Method::POST, &uri, Some(&request.to_string())).await
}

/// Replaces the random session id so bodies compare across sessions.
pub fn anonymize(mut body: Value) -> Value {
    if let Some(id) = body.get_mut("session_id") {
        *id = Value::String("SESSION".into());
    }
    if let Some(turns) = body.get_mut("turns").and_then(Value::as_array_mut) {
        for t in turns {
            t["session_id"] = Value::String("SESSION".into());
        }
    }
    body
}

/// Three turns over the fixture: a topic query, a refinement, and a second
/// refinement with per-turn overrides.
pub fn golden_requests(corpus: &Corpus) -> Vec<Value> {
    let a = &corpus.triplets()[0];
    let b = corpus.triplets().iter().find(|t| t.q1 == a.q1 && t.q2 != a.q2).unwrap_or(a);
    vec![
        serde_json::json!({ "query": a.q1 }),
        serde_json::json!({ "query": a.q2 }),
        serde_json::json!({ "query": b.q2, "overrides": { "K": 8, "M": 4, "fusion_mode": "mul" } }),
    ]
}

/// Runs a full session and returns the anonymized turn bodies.
pub async fn run_session(app: &Router, requests: &[Value]) -> Vec<Value> {
    let session = new_session(app).await;
    let mut bodies = Vec::new();
    for r in requests {
        let (status, body) = turn(app, &session, r).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        bodies.push(anonymize(body));
    }
    bodies
}
