use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::engine::{ClusterView, Engine};
use super::session::{Session, SessionStore};
use crate::error::Error;
use crate::perturb::{Frame, Method, TargetDistance};
use crate::sketch::Sketch;

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub sessions: Arc<SessionStore>,
}

impl AppState {
    pub fn new(engine: Engine) -> Self {
        let ttl = Duration::from_secs(engine.config.service.session_ttl_secs);
        Self {
            engine: Arc::new(engine),
            sessions: Arc::new(SessionStore::new(ttl)),
        }
    }
}

struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::Invalid(_) | Error::Dimension { .. } => StatusCode::BAD_REQUEST,
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Contract(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

/// Runs model work off the async workers.
async fn blocking<T, F>(f: F) -> std::result::Result<T, ApiError>
where
    F: FnOnce() -> crate::Result<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(Error::contract(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

fn parse_points(points: &[[f64; 3]]) -> crate::Result<Sketch> {
    if points.is_empty() {
        return Err(Error::invalid("a query needs at least one point"));
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite coordinate"));
    }
    Sketch::from_rows(points, None)
}

fn thumb_url(id: u64) -> String {
    format!("/api/thumb/{id}.png")
}

#[derive(Serialize)]
struct SessionCreated {
    session_id: String,
}

#[derive(Deserialize)]
struct SearchBody {
    points: Option<Vec<[f64; 3]>>,
    k: Option<usize>,
    m: Option<usize>,
}

#[derive(Serialize)]
struct ResultView {
    id: u64,
    distance: f64,
    thumb_url: String,
}

#[derive(Serialize)]
struct ClusterOut {
    members: Vec<u64>,
    representative: u64,
    thumb_url: String,
    target_id: u64,
    target: Sketch,
}

impl From<&ClusterView> for ClusterOut {
    fn from(c: &ClusterView) -> Self {
        Self {
            members: c.members.clone(),
            representative: c.representative,
            thumb_url: thumb_url(c.representative),
            target_id: c.target_id,
            target: c.target.clone(),
        }
    }
}

#[derive(Serialize)]
struct SearchResponse {
    session_id: String,
    iteration: u64,
    results: Vec<ResultView>,
    clusters: Vec<ClusterOut>,
}

#[derive(Deserialize)]
struct PerturbBody {
    weights: Vec<f64>,
    #[serde(default = "default_method")]
    method: Method,
}

fn default_method() -> Method {
    Method::Backprop
}

#[derive(Serialize)]
struct PerturbResponse {
    session_id: String,
    iteration: u64,
    method: Method,
    suggestion: Sketch,
    frames: Vec<Frame>,
    loss_trace: Vec<f64>,
    distances: Vec<TargetDistance>,
    aborted: bool,
}

#[derive(Deserialize)]
struct QueryBody {
    points: Vec<[f64; 3]>,
}

#[derive(Serialize)]
struct SessionView {
    session_id: String,
    iteration: u64,
    query: Option<Sketch>,
    suggestion: Option<Sketch>,
    clusters: Vec<ClusterOut>,
}

impl From<&Session> for SessionView {
    fn from(s: &Session) -> Self {
        Self {
            session_id: s.id.clone(),
            iteration: s.iteration,
            query: s.query.clone(),
            suggestion: s.suggestion.clone(),
            clusters: s.clusters.iter().map(ClusterOut::from).collect(),
        }
    }
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "images": state.engine.image_count(),
        "sketches": state.engine.sketch_count(),
        "sessions": state.sessions.len(),
    }))
}

async fn create_session(State(state): State<AppState>) -> Json<SessionCreated> {
    Json(SessionCreated {
        session_id: state.sessions.create(),
    })
}

async fn show_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionView> {
    let session = state
        .sessions
        .get(&id)
        .ok_or_else(|| Error::NotFound(format!("session {id}")))?;
    let s = session.lock().await;
    Ok(Json(SessionView::from(&*s)))
}

async fn search(State(state): State<AppState>, Path(id): Path<String>, Json(body): Json<SearchBody>) -> ApiResult<SearchResponse> {
    let session = state.sessions.get_or_create(&id);
    let mut s = session.lock().await;
    let query = match &body.points {
        Some(p) => parse_points(p)?,
        None => s
            .query
            .clone()
            .ok_or_else(|| Error::invalid("no points given and the session has no query"))?,
    };
    let k = body.k.unwrap_or(state.engine.config.service.k);
    let m = body.m.unwrap_or(state.engine.config.service.m);
    let engine = state.engine.clone();
    let q = query.clone();
    let outcome = blocking(move || engine.search(&q, k, m)).await?;
    s.query = Some(query);
    s.clusters = outcome.clusters.clone();
    s.suggestion = None;
    s.iteration += 1;
    Ok(Json(SearchResponse {
        session_id: s.id.clone(),
        iteration: s.iteration,
        results: outcome
            .results
            .iter()
            .map(|h| ResultView {
                id: h.id,
                distance: h.distance,
                thumb_url: thumb_url(h.id),
            })
            .collect(),
        clusters: outcome.clusters.iter().map(ClusterOut::from).collect(),
    }))
}

async fn perturb(State(state): State<AppState>, Path(id): Path<String>, Json(body): Json<PerturbBody>) -> ApiResult<PerturbResponse> {
    let session = state
        .sessions
        .get(&id)
        .ok_or_else(|| Error::NotFound(format!("session {id}")))?;
    let mut s = session.lock().await;
    let query = s.query.clone().ok_or_else(|| Error::contract("search before perturbing"))?;
    let clusters = s.clusters.clone();
    let engine = state.engine.clone();
    let out = blocking(move || engine.perturb(&query, &clusters, &body.weights, body.method)).await?;
    s.suggestion = Some(out.suggestion.clone());
    s.iteration += 1;
    Ok(Json(PerturbResponse {
        session_id: s.id.clone(),
        iteration: s.iteration,
        method: out.result.method,
        suggestion: out.suggestion,
        frames: out.frames,
        loss_trace: out.result.loss_trace,
        distances: out.result.distances,
        aborted: out.result.aborted,
    }))
}

/// Makes the last suggestion the session's query.
async fn accept(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionView> {
    let session = state
        .sessions
        .get(&id)
        .ok_or_else(|| Error::NotFound(format!("session {id}")))?;
    let mut s = session.lock().await;
    let suggestion = s.suggestion.take().ok_or_else(|| Error::contract("no suggestion to accept"))?;
    s.query = Some(suggestion);
    Ok(Json(SessionView::from(&*s)))
}

/// Replaces the query without searching, e.g. after the user edits it.
async fn set_query(State(state): State<AppState>, Path(id): Path<String>, Json(body): Json<QueryBody>) -> ApiResult<SessionView> {
    let session = state
        .sessions
        .get(&id)
        .ok_or_else(|| Error::NotFound(format!("session {id}")))?;
    let query = parse_points(&body.points)?;
    let mut s = session.lock().await;
    s.query = Some(query);
    s.suggestion = None;
    Ok(Json(SessionView::from(&*s)))
}

async fn thumbnail(State(state): State<AppState>, Path(file): Path<String>) -> Result<Response, ApiError> {
    let id: u64 = file
        .strip_suffix(".png")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::NotFound(format!("thumbnail {file}")))?;
    let bytes = state
        .engine
        .thumbnail(id)
        .ok_or_else(|| Error::NotFound(format!("thumbnail {id}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes.to_vec()).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/session", post(create_session))
        .route("/api/session/{id}", get(show_session))
        .route("/api/session/{id}/search", post(search))
        .route("/api/session/{id}/perturb", post(perturb))
        .route("/api/session/{id}/accept", post(accept))
        .route("/api/session/{id}/query", post(set_query))
        .route("/api/thumb/{file}", get(thumbnail))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: AppState, bind: &str) -> crate::Result<()> {
    let addr: SocketAddr = bind
        .parse()
        .map_err(|e| Error::invalid(format!("bind address {bind:?}: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
