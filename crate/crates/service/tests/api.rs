mod common;

use std::path::PathBuf;

use axum::http::{Method, StatusCode};
use common::*;
use datr_service::config::ServiceConfig;
use serde_json::{json, Value};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_transcript.json")
}

#[tokio::test]
async fn healthz_and_config_answer_without_a_model() {
    let (_, app) = app_with(ServiceConfig::default(), None);
    let (status, body) = call(&app, Method::GET, "/v1/healthz", None).await;
    assert_eq!((status, body), (StatusCode::OK, json!({ "status": "ok" })));

    let (status, body) = call(&app, Method::GET, "/v1/config", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["k"], 100);
    assert_eq!(body["m"], 10);
    assert_eq!(body["stage2"], true);
    assert_eq!(body["fusion_mode"], "full");
    assert_eq!(body["loaded"], false);

    let (status, _) = call(&app, Method::POST, "/v1/sessions", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn turns_follow_the_two_stage_contract() {
    let snapshot = small_snapshot();
    let corpus = small_corpus();
    let (_, app) = app_with(service_config(), Some(snapshot));
    let (_, body) = call(&app, Method::GET, "/v1/config", None).await;
    assert_eq!(body["indexed_videos"], corpus.videos().len());

    let session = new_session(&app).await;
    assert_eq!(session.len(), 32, "128-bit hex token");
    let t = &corpus.triplets()[0];

    let (status, first) = turn(&app, &session, &json!({ "query": t.q1 })).await;
    assert_eq!(status, StatusCode::OK, "{first}");
    assert_eq!(first["turn"], 1);
    let results = first["results"].as_array().unwrap();
    assert_eq!(results.len(), 5);
    for (i, r) in results.iter().enumerate() {
        assert_eq!(r["final_rank"], i + 1);
        assert_eq!(r["stage1_rank"], i + 1);
        assert!(r.get("stage2_score").is_none());
    }
    assert!(first.get("stage1_results").is_none());

    let (status, second) = turn(&app, &session, &json!({ "query": t.q2 })).await;
    assert_eq!(status, StatusCode::OK, "{second}");
    assert_eq!(second["turn"], 2);
    let results = second["results"].as_array().unwrap();
    assert_eq!(results.len(), 5);
    let scores: Vec<f64> = results.iter().map(|r| r["stage2_score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]), "{scores:?}");
    for r in results {
        let rank = r["stage1_rank"].as_u64().unwrap();
        assert!((1..=12).contains(&rank));
    }
    let stage1 = second["stage1_results"].as_array().unwrap();
    assert_eq!(stage1.len(), 5);
    let turn1_ids: Vec<&Value> = first["results"].as_array().unwrap().iter().map(|r| &r["video_id"]).collect();
    let stage1_ids: Vec<&Value> = stage1.iter().map(|r| &r["video_id"]).collect();
    assert_eq!(turn1_ids, stage1_ids, "stage-I order comes from the first query");

    let (status, off) = turn(
        &app,
        &session,
        &json!({ "query": t.q2, "overrides": { "stage2": false } }),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{off}");
    let off_ids: Vec<&Value> = off["results"].as_array().unwrap().iter().map(|r| &r["video_id"]).collect();
    assert_eq!(off_ids, stage1_ids, "stage II off keeps the stage-I order");
    assert_eq!(off["config"]["stage2"], false);

    let (status, transcript) = call(&app, Method::GET, &format!("/v1/sessions/{session}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(transcript["session_id"], session.as_str());
    assert_eq!(transcript["turns"], json!([first, second, off]));
}

#[tokio::test]
async fn errors_map_to_statuses() {
    let (_, app) = app_with(service_config(), Some(small_snapshot()));
    let (status, body) = turn(&app, "nope", &json!({ "query": "a" })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].as_str().unwrap().contains("nope"));
    let (status, _) = call(&app, Method::GET, "/v1/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let session = new_session(&app).await;
    for bad in [
        json!({ "query": "" }),
        json!({ "query": "   " }),
        json!({ "query": "x", "overrides": { "K": 2, "M": 3 } }),
        json!({ "query": "x", "overrides": { "M": 0 } }),
        json!({ "query": "x", "overrides": { "fusion_mode": "sum" } }),
        json!({ "text": "x" }),
    ] {
        let (status, body) = turn(&app, &session, &bad).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad} -> {body}");
        assert!(body["error"].is_string());
    }
    let uri = format!("/v1/sessions/{session}/turns");
    let (status, _) = call(&app, Method::POST, &uri, Some("{not json")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (_, transcript) = call(&app, Method::GET, &format!("/v1/sessions/{session}"), None).await;
    assert_eq!(transcript["turns"], json!([]), "rejected turns leave no trace");

    let (status, _) = call(&app, Method::GET, "/v1/videos/none", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn expired_sessions_answer_gone() {
    let config = ServiceConfig {
        session_ttl_seconds: 0,
        ..service_config()
    };
    let (_, app) = app_with(config, Some(small_snapshot()));
    let session = new_session(&app).await;
    let (status, _) = turn(&app, &session, &json!({ "query": "anything" })).await;
    assert_eq!(status, StatusCode::GONE);
    let (status, _) = call(&app, Method::GET, &format!("/v1/sessions/{session}"), None).await;
    assert_eq!(status, StatusCode::GONE);
}

#[tokio::test]
async fn video_metadata_comes_from_the_corpus() {
    let corpus = small_corpus();
    let (_, app) = app_with(service_config(), Some(small_snapshot()));
    let t = &corpus.triplets()[0];
    let (status, body) = call(&app, Method::GET, &format!("/v1/videos/{}", t.video_id), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["video_id"], t.video_id.as_str());
    assert_eq!(body["source_id"], t.source_id.as_str());
    assert_eq!(body["n_frames"], 8);
    assert_eq!(body["d_in"], 8);
    if !t.d_v.is_empty() {
        assert!(body["descriptions"].as_array().unwrap().contains(&json!(t.d_v)));
    }
}

#[tokio::test]
async fn installed_snapshot_leaves_open_sessions_alone() {
    let corpus = small_corpus();
    let (state, app) = app_with(service_config(), Some(small_snapshot()));
    let requests = golden_requests(&corpus);
    let old = new_session(&app).await;
    let (_, before) = turn(&app, &old, &requests[0]).await;

    let mut subset = std::collections::BTreeSet::new();
    subset.insert(corpus.videos()[0].video_id.clone());
    let fresh = small_snapshot();
    let index = datr_core::retrieval::EmbeddingIndex::build(corpus.subset(&subset).videos(), &fresh.model).unwrap();
    state.install(datr_service::api::Snapshot::new(fresh.model, index, None).unwrap());

    let (_, again) = turn(&app, &old, &requests[1]).await;
    let pairs = |list: &Value| -> Vec<(Value, Value)> {
        list.as_array()
            .unwrap()
            .iter()
            .map(|r| (r["video_id"].clone(), r["stage1_score"].clone()))
            .collect()
    };
    assert_eq!(pairs(&before["results"]), pairs(&again["stage1_results"]));
    assert_eq!(again["results"].as_array().unwrap().len(), 5);
    let new = new_session(&app).await;
    let (_, other) = turn(&app, &new, &requests[0]).await;
    assert_eq!(other["results"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn golden_transcript_replays_exactly() {
    let (_, app) = app_with(service_config(), Some(small_snapshot()));
    let path = golden_path();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        let requests = golden_requests(&small_corpus());
        let responses = run_session(&app, &requests).await;
        let golden = json!({ "requests": requests, "responses": responses });
        std::fs::write(&path, serde_json::to_string_pretty(&golden).unwrap() + "\n").unwrap();
    }
    let golden: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let requests = golden["requests"].as_array().unwrap();
    assert_eq!(requests.len(), 3);
    let replay = run_session(&app, requests).await;
    assert_eq!(Value::Array(replay), golden["responses"]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_match_serial_runs() {
    let (_, app) = app_with(service_config(), Some(small_snapshot()));
    let corpus = small_corpus();
    let scripts: Vec<Vec<Value>> = (0..16)
        .map(|i| {
            let a = &corpus.triplets()[i % corpus.triplets().len()];
            let b = &corpus.triplets()[(i * 7 + 3) % corpus.triplets().len()];
            vec![
                json!({ "query": a.q1 }),
                json!({ "query": a.q2, "overrides": { "stage2": i % 3 != 0 } }),
                json!({ "query": b.q2, "overrides": { "fusion_mode": (["full", "add", "mul"][i % 3]) } }),
            ]
        })
        .collect();
    let mut serial = Vec::new();
    for s in &scripts {
        serial.push(run_session(&app, s).await);
    }
    let handles: Vec<_> = scripts
        .iter()
        .cloned()
        .map(|s| {
            let app = app.clone();
            tokio::spawn(async move { run_session(&app, &s).await })
        })
        .collect();
    for (h, expected) in handles.into_iter().zip(&serial) {
        assert_eq!(&h.await.unwrap(), expected);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn turns_on_one_session_are_serialized() {
    let (_, app) = app_with(service_config(), Some(small_snapshot()));
    let session = new_session(&app).await;
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let app = app.clone();
            let session = session.clone();
            tokio::spawn(async move { turn(&app, &session, &json!({ "query": format!("query {i}") })).await })
        })
        .collect();
    let mut turns = Vec::new();
    for h in handles {
        let (status, body) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        turns.push(body["turn"].as_u64().unwrap());
    }
    turns.sort_unstable();
    assert_eq!(turns, (1..=8).collect::<Vec<_>>());
    let (_, transcript) = call(&app, Method::GET, &format!("/v1/sessions/{session}"), None).await;
    assert_eq!(transcript["turns"].as_array().unwrap().len(), 8);
}
