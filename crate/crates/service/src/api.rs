//! HTTP session service: one immutable model/index snapshot shared by every
//! request, and an in-memory session store with per-session locking.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use datr_core::data::Corpus;
use datr_core::model::{Datr, FusionMode};
use datr_core::retrieval::{run_pipeline, EmbeddingIndex, PipelineConfig, RankedList, SessionState};
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;
use crate::error::{CliError, CliResult};

/// Metadata served by `GET /v1/videos/{id}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VideoInfo {
    pub video_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    pub n_frames: usize,
    pub d_in: usize,
    /// Descriptions attached to the video by its triplets, deduplicated.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub descriptions: Vec<String>,
}

/// Model, index and video metadata that answer requests together.
#[derive(Debug)]
pub struct Snapshot {
    pub model: Datr,
    pub index: EmbeddingIndex,
    pub videos: BTreeMap<String, VideoInfo>,
}

impl Snapshot {
    /// Pairs a model with an index built from it; metadata comes from `corpus`
    /// when given, otherwise from the model's frame shape alone.
    pub fn new(model: Datr, index: EmbeddingIndex, corpus: Option<&Corpus>) -> CliResult<Self> {
        if index.checkpoint_digest() != &model.digest() {
            return Err(CliError::Usage(
                "index was built from a different checkpoint; rebuild it with build-index".into(),
            ));
        }
        let (n_frames, d_in) = (model.config().n_frames, model.config().d_in);
        let mut videos: BTreeMap<String, VideoInfo> = index
            .ids()
            .iter()
            .map(|id| {
                let info = VideoInfo {
                    video_id: id.clone(),
                    source_id: None,
                    n_frames,
                    d_in,
                    descriptions: Vec::new(),
                };
                (id.clone(), info)
            })
            .collect();
        if let Some(corpus) = corpus {
            for v in corpus.videos() {
                if let Some(info) = videos.get_mut(&v.video_id) {
                    info.source_id = Some(v.source_id.clone());
                }
            }
            for t in corpus.triplets() {
                if let Some(info) = videos.get_mut(&t.video_id) {
                    if !t.d_v.is_empty() && !info.descriptions.contains(&t.d_v) {
                        info.descriptions.push(t.d_v.clone());
                    }
                }
            }
        }
        Ok(Self { model, index, videos })
    }

    pub fn load(config: &ServiceConfig) -> CliResult<Self> {
        let model = Datr::load(&config.checkpoint_path)?;
        let index = EmbeddingIndex::load(&config.index_path)?;
        let corpus = config.corpus_dir.as_ref().map(Corpus::load).transpose()?;
        Self::new(model, index, corpus.as_ref())
    }
}

/// Per-turn overrides of the service defaults.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(alias = "K")]
    pub k: Option<usize>,
    #[serde(alias = "M")]
    pub m: Option<usize>,
    pub stage2: Option<bool>,
    pub fusion_mode: Option<FusionMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRequest {
    pub query: String,
    #[serde(default)]
    pub overrides: Option<Overrides>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EffectiveConfig {
    pub k: usize,
    pub m: usize,
    pub stage2: bool,
    pub fusion_mode: FusionMode,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultItem {
    pub final_rank: usize,
    pub video_id: String,
    pub stage1_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_score: Option<f64>,
    /// Position of the video in the stage-I candidate list.
    pub stage1_rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stage1Item {
    pub stage1_rank: usize,
    pub video_id: String,
    pub stage1_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TurnResponse {
    pub session_id: String,
    pub turn: usize,
    pub query: String,
    pub config: EffectiveConfig,
    pub results: Vec<ResultItem>,
    /// From turn 2 on: the stage-I-only head of the same candidate list.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1_results: Option<Vec<Stage1Item>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Transcript {
    pub session_id: String,
    pub turns: Vec<TurnResponse>,
}

struct Session {
    snapshot: Arc<Snapshot>,
    state: SessionState,
    history: Vec<TurnResponse>,
    last_used: Instant,
    expired: bool,
}

/// Shared service state.
pub struct AppState {
    config: ServiceConfig,
    snapshot: RwLock<Option<Arc<Snapshot>>>,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig, snapshot: Option<Snapshot>) -> Arc<Self> {
        Arc::new(Self {
            config,
            snapshot: RwLock::new(snapshot.map(Arc::new)),
            sessions: Mutex::new(HashMap::new()),
        })
    }

    /// Replaces the snapshot for sessions created from now on. Existing
    /// sessions keep answering from the snapshot they started with.
    pub fn install(&self, snapshot: Snapshot) {
        *self.snapshot.write().expect("snapshot lock") = Some(Arc::new(snapshot));
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn current(&self) -> Option<Arc<Snapshot>> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn ttl(&self) -> Duration {
        Duration::from_secs(self.config.session_ttl_seconds)
    }

    fn session(&self, id: &str) -> Option<Arc<tokio::sync::Mutex<Session>>> {
        self.sessions.lock().expect("session map").get(id).cloned()
    }

    /// Drops sessions that expired more than one TTL ago; recently expired
    /// ones stay so that they still answer 410.
    fn evict(&self, now: Instant) {
        let horizon = self.ttl() * 2;
        self.sessions.lock().expect("session map").retain(|_, s| match s.try_lock() {
            Ok(s) => now.duration_since(s.last_used) <= horizon,
            Err(_) => true,
        });
    }
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn err(status: StatusCode, message: impl Into<String>) -> ApiError {
    ApiError(status, message.into())
}

type ApiResult<T> = std::result::Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/config", get(config))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/turns", post(post_turn))
        .route("/v1/videos/{id}", get(get_video))
        .with_state(state)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Serialize)]
struct ConfigView<'a> {
    #[serde(flatten)]
    service: &'a ServiceConfig,
    loaded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    indexed_videos: Option<usize>,
}

async fn config(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let snapshot = state.current();
    let view = ConfigView {
        service: &state.config,
        loaded: snapshot.is_some(),
        indexed_videos: snapshot.map(|s| s.index.len()),
    };
    Json(serde_json::to_value(view).expect("config serializes"))
}

async fn create_session(State(state): State<Arc<AppState>>) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let snapshot = state
        .current()
        .ok_or_else(|| err(StatusCode::SERVICE_UNAVAILABLE, "model and index are not loaded"))?;
    let now = Instant::now();
    state.evict(now);
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = Session {
        snapshot,
        state: SessionState::new(id.clone()),
        history: Vec::new(),
        last_used: now,
        expired: false,
    };
    state
        .sessions
        .lock()
        .expect("session map")
        .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "session_id": id }))))
}

/// Marks the session expired when its TTL has elapsed, otherwise refreshes it.
fn touch(session: &mut Session, ttl: Duration) -> ApiResult<()> {
    let now = Instant::now();
    if session.expired || now.duration_since(session.last_used) >= ttl {
        session.expired = true;
        return Err(err(StatusCode::GONE, "session expired"));
    }
    session.last_used = now;
    Ok(())
}

fn ranks(list: &RankedList) -> HashMap<&str, usize> {
    list.ids().enumerate().map(|(i, id)| (id, i + 1)).collect()
}

/// Builds the response body of one turn from the session after the turn ran.
pub fn turn_response(state: &SessionState, config: &PipelineConfig) -> TurnResponse {
    let result = state.last.as_ref().expect("turn recorded");
    let candidates = state.candidates.as_ref().expect("turn recorded");
    let stage1_rank = ranks(candidates);
    let turn = state.turns.len();
    TurnResponse {
        session_id: state.session_id.clone(),
        turn,
        query: state.turns.last().cloned().unwrap_or_default(),
        config: EffectiveConfig {
            k: config.k,
            m: config.m,
            stage2: config.stage2,
            fusion_mode: config.fusion,
        },
        results: result
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| ResultItem {
                final_rank: i + 1,
                video_id: e.video_id.clone(),
                stage1_score: e.stage1_score,
                stage2_score: e.stage2_score,
                stage1_rank: stage1_rank[e.video_id.as_str()],
            })
            .collect(),
        stage1_results: (turn >= 2).then(|| {
            candidates
                .head(config.m)
                .entries
                .into_iter()
                .enumerate()
                .map(|(i, e)| Stage1Item {
                    stage1_rank: i + 1,
                    video_id: e.video_id,
                    stage1_score: e.stage1_score,
                })
                .collect()
        }),
    }
}

fn effective(defaults: PipelineConfig, overrides: Option<Overrides>) -> ApiResult<PipelineConfig> {
    let o = overrides.unwrap_or_default();
    let config = PipelineConfig {
        k: o.k.unwrap_or(defaults.k),
        m: o.m.unwrap_or(defaults.m),
        stage2: o.stage2.unwrap_or(defaults.stage2),
        fusion: o.fusion_mode.unwrap_or(defaults.fusion),
    };
    if !(config.k >= config.m && config.m >= 1) {
        return Err(err(
            StatusCode::BAD_REQUEST,
            format!("need K >= M >= 1, got K = {} and M = {}", config.k, config.m),
        ));
    }
    Ok(config)
}

async fn post_turn(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: std::result::Result<Json<TurnRequest>, JsonRejection>,
) -> ApiResult<Json<TurnResponse>> {
    let session = state
        .session(&id)
        .ok_or_else(|| err(StatusCode::NOT_FOUND, format!("unknown session {id}")))?;
    let mut session = session.lock().await;
    touch(&mut session, state.ttl())?;
    let Json(request) = body.map_err(|e| err(StatusCode::BAD_REQUEST, e.body_text()))?;
    if request.query.trim().is_empty() {
        return Err(err(StatusCode::BAD_REQUEST, "query is empty"));
    }
    let config = effective(state.config.pipeline(), request.overrides)?;
    let snapshot = session.snapshot.clone();
    let mut next = session.state.clone();
    run_pipeline(&mut next, &request.query, &snapshot.model, &snapshot.index, &config)
        .map_err(|e| err(StatusCode::BAD_REQUEST, e.to_string()))?;
    let response = turn_response(&next, &config);
    session.state = next;
    session.history.push(response.clone());
    Ok(Json(response))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Transcript>> {
    let session = state
        .session(&id)
        .ok_or_else(|| err(StatusCode::NOT_FOUND, format!("unknown session {id}")))?;
    let mut session = session.lock().await;
    touch(&mut session, state.ttl())?;
    Ok(Json(Transcript {
        session_id: id,
        turns: session.history.clone(),
    }))
}

async fn get_video(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<VideoInfo>> {
    let snapshot = state
        .current()
        .ok_or_else(|| err(StatusCode::SERVICE_UNAVAILABLE, "model and index are not loaded"))?;
    snapshot
        .videos
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| err(StatusCode::NOT_FOUND, format!("unknown video {id}")))
}
