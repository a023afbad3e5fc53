//! REST routes under `/api/v1`.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use biaslens_core::engine::{
    forward_query, intersection_query, inverse_query, BiasError, ForwardQueryResult, QueryEffects, ScoringSnapshot,
};
use biaslens_core::generation::{GenerationError, GenerationJob};
use biaslens_core::session::{AnchorSpec, TreeOp};
use biaslens_core::tree::TreeError;
use biaslens_core::{AnchorId, ImageId, NodeId, Session, SessionConfig, SessionError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::feed::Change;
use crate::state::{lock, SessionSlot, SessionState, Shared};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

fn tree_status(e: &TreeError) -> StatusCode {
    match e {
        TreeError::UnknownNode(_) | TreeError::UnknownEdge(_) => StatusCode::NOT_FOUND,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::UnknownAnchor(_) | SessionError::UnknownImage(_) => StatusCode::NOT_FOUND,
            SessionError::Tree(t) => tree_status(t),
            SessionError::AnchorNodeProtected(_)
            | SessionError::Format(_)
            | SessionError::InvalidConfig(_)
            | SessionError::DuplicateAnchor(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Embedding(_) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<BiasError> for ApiError {
    fn from(e: BiasError) -> Self {
        let status = match &e {
            BiasError::ProviderUnavailable(_) | BiasError::Provider(_) | BiasError::DimMismatch { .. } => {
                StatusCode::BAD_GATEWAY
            }
            BiasError::Tree(t) => tree_status(t),
            BiasError::UnknownAnchor(_) => StatusCode::NOT_FOUND,
            BiasError::EmptySession
            | BiasError::EmptyAnchorSet
            | BiasError::NoGeneratedImages(_)
            | BiasError::NotTwoAnchors(_)
            | BiasError::TooFewAnchors(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<GenerationError> for ApiError {
    fn from(e: GenerationError) -> Self {
        match e {
            GenerationError::Tree(t) => Self::new(tree_status(&t), t.to_string()),
            GenerationError::Session(s) => s.into(),
            GenerationError::UnknownJob(_) => Self::new(StatusCode::NOT_FOUND, e.to_string()),
            _ => Self::new(StatusCode::BAD_GATEWAY, e.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;
type App = State<Arc<Shared>>;

fn slot(app: &Shared, id: &str) -> ApiResult<Arc<SessionSlot>> {
    app.slot(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
}

fn node_text(st: &SessionState, node: NodeId) -> ApiResult<String> {
    Ok(st.session.serialize_node(node)?)
}

fn apply_effects(slot: &SessionSlot, effects: QueryEffects) {
    if effects.is_empty() {
        return;
    }
    let mut st = lock(&slot.state);
    match effects.apply(&mut st.session) {
        Ok(()) => st.needs_save = true,
        Err(e) => log::warn!("query side effects rejected: {e}"),
    }
}

#[derive(Debug, Serialize)]
struct SessionSummary {
    id: String,
    name: String,
    version: u64,
    tree_version: u64,
    anchors: Vec<AnchorId>,
    images: usize,
}

async fn list_sessions(State(app): App) -> Json<Vec<SessionSummary>> {
    let list = app
        .slots()
        .into_iter()
        .map(|(_, slot)| {
            let st = lock(&slot.state);
            let s = &st.session;
            SessionSummary {
                id: s.id().to_owned(),
                name: s.name().to_owned(),
                version: s.version(),
                tree_version: s.tree().version(),
                anchors: s.anchors().iter().map(|a| a.id.clone()).collect(),
                images: s.images().len(),
            }
        })
        .collect();
    Json(list)
}

#[derive(Debug, Deserialize)]
struct CreateSession {
    name: String,
    anchors: Vec<AnchorSpec>,
    #[serde(default)]
    n: Option<usize>,
    #[serde(default)]
    m: Option<usize>,
}

fn session_view(st: &SessionState) -> ApiResult<Value> {
    let mut v = serde_json::to_value(&st.session)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let texts = st.session.tree().serialize_all();
    let scores: serde_json::Map<String, Value> = texts
        .keys()
        .filter_map(|n| st.current_score(*n).map(|s| (n.to_string(), json!(s))))
        .collect();
    let obj = v.as_object_mut().expect("session serializes to an object");
    obj.insert("tree_version".into(), json!(st.session.tree().version()));
    obj.insert("texts".into(), json!(texts));
    obj.insert("scores".into(), Value::Object(scores));
    obj.insert("jobs".into(), json!(st.jobs.values().collect::<Vec<_>>()));
    Ok(v)
}

async fn create_session(State(app): App, Json(req): Json<CreateSession>) -> ApiResult<(StatusCode, Json<Value>)> {
    let mut config = SessionConfig::default();
    config.n = req.n.unwrap_or(config.n);
    config.m = req.m.unwrap_or(config.m);
    let session = Session::create(&req.name, req.anchors, config)?;
    let app2 = app.clone();
    let slot = blocking(move || app2.add_session(session)).await??;
    let view = session_view(&lock(&slot.state))?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session(State(app): App, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = slot(&app, &id)?;
    let view = session_view(&lock(&slot.state))?;
    Ok(Json(view))
}

#[derive(Debug, Deserialize)]
struct TreePatch {
    /// Tree version the client's edit was based on.
    base_version: u64,
    #[serde(flatten)]
    op: TreeOp,
}

#[derive(Debug, Serialize)]
struct PatchAck {
    version: u64,
    tree_version: u64,
    created_node: Option<NodeId>,
    created_edge: Option<u64>,
    removed_nodes: Vec<NodeId>,
    /// Nodes whose new score will arrive on the change feed.
    pending: Vec<NodeId>,
}

async fn patch_tree(State(app): App, Path(id): Path<String>, Json(req): Json<TreePatch>) -> ApiResult<Response> {
    let slot = slot(&app, &id)?;
    let ack = {
        let mut st = lock(&slot.state);
        let current = st.session.tree().version();
        if req.base_version != current {
            let body = json!({
                "error": format!("tree is at version {current}, edit was based on {}", req.base_version),
                "tree_version": current,
            });
            return Ok((StatusCode::CONFLICT, Json(body)).into_response());
        }
        let change = st.session.apply_tree_op(req.op)?;
        for n in &change.removed_nodes {
            st.scores.remove(n);
            st.dirty.remove(n);
        }
        let pending: Vec<NodeId> = change.rescore.iter().map(|(n, _)| *n).collect();
        st.dirty.extend(pending.iter().copied());
        st.needs_save = true;
        PatchAck {
            version: change.version,
            tree_version: change.tree_version,
            created_node: change.created_node,
            created_edge: change.created_edge,
            removed_nodes: change.removed_nodes,
            pending,
        }
    };
    if !ack.pending.is_empty() {
        app.schedule(&id);
    }
    Ok(Json(ack).into_response())
}

#[derive(Debug, Deserialize)]
struct SinceQuery {
    #[serde(default)]
    since: Option<u64>,
}

async fn get_scores(State(app): App, Path(id): Path<String>, Query(q): Query<SinceQuery>) -> ApiResult<Response> {
    let slot = slot(&app, &id)?;
    let st = lock(&slot.state);
    let head = st.session.version();
    let since = q.since.unwrap_or(st.feed.floor());
    match st.feed.since(since, head) {
        Ok(entries) => Ok(Json(json!({ "version": head, "entries": entries })).into_response()),
        Err(gone) => Ok((
            StatusCode::GONE,
            Json(json!({
                "error": format!("feed position {since} is unavailable; refresh the session"),
                "floor": gone.floor,
                "version": gone.head,
            })),
        )
            .into_response()),
    }
}

async fn get_node_score(State(app): App, Path((id, node)): Path<(String, NodeId)>) -> ApiResult<Json<Value>> {
    let slot = slot(&app, &id)?;
    let st = lock(&slot.state);
    let text = node_text(&st, node)?;
    if !st.is_test_node(node) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("node {node} is not a test node"),
        ));
    }
    Ok(Json(match st.current_score(node) {
        Some(score) => json!({ "status": "ready", "node_id": node, "score": score }),
        None => json!({
            "status": "pending",
            "node_id": node,
            "test_text": text,
            "version": st.session.version(),
        }),
    }))
}

#[derive(Debug, Deserialize)]
struct ForwardRequest {
    test_node_ids: Vec<NodeId>,
}

#[derive(Debug, Serialize)]
struct NodeForward {
    node_id: NodeId,
    #[serde(flatten)]
    result: ForwardQueryResult,
}

async fn forward(State(app): App, Path(id): Path<String>, Json(req): Json<ForwardRequest>) -> ApiResult<Json<Value>> {
    let slot = slot(&app, &id)?;
    let (snap, work) = {
        let st = lock(&slot.state);
        let work = req
            .test_node_ids
            .iter()
            .map(|n| node_text(&st, *n).map(|t| (*n, t)))
            .collect::<ApiResult<Vec<_>>>()?;
        let texts: Vec<&str> = work.iter().map(|(_, t)| t.as_str()).collect();
        (ScoringSnapshot::capture(&st.session, &texts)?, work)
    };
    let provider = app.provider.clone();
    let tree_version = snap.tree_version;
    let (results, effects) = blocking(move || {
        let mut effects = QueryEffects::default();
        let mut results = Vec::with_capacity(work.len());
        for (node, text) in work {
            let (result, fx) = forward_query(&snap, &text, provider.as_ref())?;
            effects.extend(fx);
            results.push(NodeForward { node_id: node, result });
        }
        Ok::<_, BiasError>((results, effects))
    })
    .await??;
    apply_effects(&slot, effects);
    Ok(Json(json!({ "tree_version": tree_version, "results": results })))
}

#[derive(Debug, Deserialize)]
struct IntersectionRequest {
    t1: NodeId,
    t2: NodeId,
}

async fn intersection(
    State(app): App,
    Path(id): Path<String>,
    Json(req): Json<IntersectionRequest>,
) -> ApiResult<Json<Value>> {
    let slot = slot(&app, &id)?;
    let (snap, t1, t2) = {
        let st = lock(&slot.state);
        let t1 = node_text(&st, req.t1)?;
        let t2 = node_text(&st, req.t2)?;
        (ScoringSnapshot::capture(&st.session, &[&t1, &t2])?, t1, t2)
    };
    let provider = app.provider.clone();
    let tree_version = snap.tree_version;
    let (a, b) = (t1.clone(), t2.clone());
    let (points, effects) = blocking(move || intersection_query(&snap, &a, &b, provider.as_ref())).await??;
    apply_effects(&slot, effects);
    Ok(Json(json!({
        "tree_version": tree_version,
        "t1": { "node_id": req.t1, "test_text": t1 },
        "t2": { "node_id": req.t2, "test_text": t2 },
        "points": points,
    })))
}

#[derive(Debug, Deserialize)]
struct InverseRequest {
    node_id: NodeId,
    /// Anchor pair for the x axis; defaults to the first two anchors.
    #[serde(default)]
    anchors: Option<(AnchorId, AnchorId)>,
}

async fn inverse(State(app): App, Path(id): Path<String>, Json(req): Json<InverseRequest>) -> ApiResult<Response> {
    let slot = slot(&app, &id)?;
    let (snap, text) = {
        let st = lock(&slot.state);
        let text = node_text(&st, req.node_id)?;
        if st.session.test_images(req.node_id).is_empty() {
            let running = st
                .jobs
                .values()
                .find(|j| j.node_id == req.node_id && !j.status.is_terminal());
            if let Some(job) = running {
                let body = json!({ "status": "pending", "job_id": job.job_id, "version": st.session.version() });
                return Ok((StatusCode::ACCEPTED, Json(body)).into_response());
            }
        }
        (ScoringSnapshot::capture(&st.session, &[&text])?, text)
    };
    let provider = app.provider.clone();
    let tree_version = snap.tree_version;
    let (node, t, pair) = (req.node_id, text.clone(), req.anchors.clone());
    let (points, effects) = blocking(move || {
        let pair = pair.as_ref().map(|(a, b)| (a, b));
        inverse_query(&snap, node, &t, pair, provider.as_ref())
    })
    .await??;
    apply_effects(&slot, effects);
    let body = json!({
        "tree_version": tree_version,
        "node_id": req.node_id,
        "test_text": text,
        "points": points,
    });
    Ok(Json(body).into_response())
}

#[derive(Debug, Deserialize)]
struct JobRequest {
    node_id: NodeId,
    #[serde(default)]
    m: Option<usize>,
}

async fn create_job(
    State(app): App,
    Path(id): Path<String>,
    Json(req): Json<JobRequest>,
) -> ApiResult<(StatusCode, Json<GenerationJob>)> {
    let generator = app
        .generator
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::BAD_GATEWAY, "no image generator configured"))?;
    let slot = slot(&app, &id)?;
    if req.m == Some(0) {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "m must be positive"));
    }
    let (prompt, m) = {
        let st = lock(&slot.state);
        (node_text(&st, req.node_id)?, req.m.unwrap_or(st.session.config().m))
    };
    let p = prompt.clone();
    let remote = blocking(move || generator.submit(&p, m)).await??;
    let job = GenerationJob::new(req.node_id, prompt, m, remote);
    {
        let mut st = lock(&slot.state);
        st.jobs.insert(job.job_id.clone(), job.clone());
        st.publish(vec![Change::Job {
            job_id: job.job_id.clone(),
            node_id: job.node_id,
            status: job.status.clone(),
        }]);
    }
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn get_job(State(app): App, Path((id, job)): Path<(String, String)>) -> ApiResult<Json<GenerationJob>> {
    let slot = slot(&app, &id)?;
    let st = lock(&slot.state);
    st.jobs
        .get(&job)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {job}")))
}

async fn get_image(State(app): App, Path((id, image)): Path<(String, String)>) -> ApiResult<Response> {
    let slot = slot(&app, &id)?;
    let path = {
        let st = lock(&slot.state);
        slot.dir.join(&st.session.image(&ImageId::new(image))?.file_ref)
    };
    let bytes = blocking(move || std::fs::read(path))
        .await?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn health(State(app): App) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "embedder": app.provider.describe(),
        "generator": app.generator.is_some(),
        "sessions": app.slots().len(),
    }))
}

pub fn router(app: Arc<Shared>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/tree", patch(patch_tree))
        .route("/sessions/{id}/scores", get(get_scores))
        .route("/sessions/{id}/nodes/{nid}/score", get(get_node_score))
        .route("/sessions/{id}/queries/forward", post(forward))
        .route("/sessions/{id}/queries/intersection", post(intersection))
        .route("/sessions/{id}/queries/inverse", post(inverse))
        .route("/sessions/{id}/jobs", post(create_job))
        .route("/sessions/{id}/jobs/{job}", get(get_job))
        .route("/sessions/{id}/images/{img}", get(get_image))
        .with_state(app);
    Router::new().nest("/api/v1", api)
}
