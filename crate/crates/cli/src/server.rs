//! JSON-over-HTTP service under `/v1`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slayr_core::conditioning::{ConditionRequest, DEFAULT_LAMBDA};
use slayr_core::dataset::Scene;
use slayr_core::embedding::NULL_LABEL;
use slayr_core::flow::{Checkpoint, DEFAULT_STEPS};
use slayr_core::Error;
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};

/// Largest `n` accepted by `/v1/generate`.
pub const MAX_LAYOUTS_PER_REQUEST: usize = 1000;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub addr: String,
    pub default_steps: usize,
    pub default_lambda: f64,
    pub max_concurrent: usize,
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            default_steps: DEFAULT_STEPS,
            default_lambda: DEFAULT_LAMBDA,
            max_concurrent: 4,
            cors_origins: Vec::new(),
        }
    }
}

pub struct AppState {
    pub checkpoint: Checkpoint,
    pub checkpoint_hash: String,
    pub config: ServerConfig,
    pub permits: Semaphore,
}

impl AppState {
    /// `bytes` are the checkpoint file contents; their SHA-256 identifies
    /// the model in `/v1/health`.
    pub fn from_bytes(bytes: &[u8], config: ServerConfig) -> slayr_core::Result<Self> {
        let checkpoint = Checkpoint::from_bytes(bytes)?;
        let checkpoint_hash = hex::encode(Sha256::digest(bytes));
        Ok(Self::new(checkpoint, checkpoint_hash, config))
    }

    pub fn new(checkpoint: Checkpoint, checkpoint_hash: String, config: ServerConfig) -> Self {
        let permits = Semaphore::new(config.max_concurrent.max(1));
        Self { checkpoint, checkpoint_hash, config, permits }
    }
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest { message: String, path: Option<String> },
    Busy,
    Internal(String),
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<String>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::BadRequest { message, path } => {
                (StatusCode::BAD_REQUEST, ErrorBody { error: message, path, id: None })
            }
            ApiError::Busy => (
                StatusCode::CONFLICT,
                ErrorBody { error: "too many concurrent generations".into(), path: None, id: None },
            ),
            ApiError::Internal(detail) => {
                let id = uuid::Uuid::new_v4().to_string();
                log::error!("internal error {id}: {detail}");
                (
                    StatusCode::INTERNAL_SERVER_ERROR,
                    ErrorBody { error: "internal error".into(), path: None, id: Some(id) },
                )
            }
        };
        (status, Json(body)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownLabel(_)
            | Error::IndexOutOfRange { .. }
            | Error::InvalidConstraint(_)
            | Error::DimensionMismatch { .. }
            | Error::Config(_) => ApiError::BadRequest { message: e.to_string(), path: None },
            other => ApiError::Internal(other.to_string()),
        }
    }
}

fn bad(message: impl Into<String>, path: &str) -> ApiError {
    ApiError::BadRequest { message: message.into(), path: Some(path.into()) }
}

/// Parses a JSON body, reporting the path of the offending field.
fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ApiError::BadRequest { message: e.into_inner().to_string(), path: Some(path) }
    })
}

/// Runs CPU-bound work off the async threads while holding a permit.
async fn run_limited<T: Send + 'static>(
    state: &Arc<AppState>,
    work: impl FnOnce(&AppState) -> slayr_core::Result<T> + Send + 'static,
) -> Result<T, ApiError> {
    let _permit = state.permits.try_acquire().map_err(|_| ApiError::Busy)?;
    let st = Arc::clone(state);
    tokio::task::spawn_blocking(move || work(&st))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default = "one")]
    pub n: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default, rename = "T")]
    pub steps: Option<usize>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub layouts: Vec<Scene>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ConditionedResponse {
    pub layout: Scene,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRequest {
    pub embedding: Vec<f64>,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    5
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub label: String,
    pub similarity: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub labels: Vec<ScoredLabel>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelsResponse {
    pub labels: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub checkpoint_hash: String,
}

fn check_steps(steps: Option<usize>) -> Result<(), ApiError> {
    if steps == Some(0) {
        return Err(bad("T must be at least 1", "T"));
    }
    Ok(())
}

async fn generate(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<GenerateResponse>, ApiError> {
    let req: GenerateRequest = parse(&body)?;
    if req.n == 0 || req.n > MAX_LAYOUTS_PER_REQUEST {
        return Err(bad(format!("n must be in 1..={MAX_LAYOUTS_PER_REQUEST}"), "n"));
    }
    check_steps(req.steps)?;
    state.checkpoint.vocab.prompt_id(&req.prompt).map_err(|e| bad(e.to_string(), "prompt"))?;
    let layouts = run_limited(&state, move |st| {
        let steps = req.steps.unwrap_or(st.config.default_steps);
        st.checkpoint.generate(&req.prompt, req.n, req.seed.unwrap_or(0), steps)
    })
    .await?;
    Ok(Json(GenerateResponse { layouts }))
}

async fn generate_conditioned(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Json<ConditionedResponse>, ApiError> {
    let req: ConditionRequest = parse(&body)?;
    check_steps(req.steps)?;
    state.checkpoint.vocab.prompt_id(&req.prompt).map_err(|e| bad(e.to_string(), "prompt"))?;
    let layout = run_limited(&state, move |st| {
        st.checkpoint.generate_conditioned(&req, st.config.default_steps, st.config.default_lambda)
    })
    .await?;
    Ok(Json(ConditionedResponse { layout }))
}

async fn decode(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<DecodeResponse>, ApiError> {
    let req: DecodeRequest = parse(&body)?;
    let d = state.checkpoint.vocab.d();
    if req.embedding.len() != d {
        return Err(bad(format!("expected {d} values, got {}", req.embedding.len()), "embedding"));
    }
    if req.embedding.iter().any(|v| !v.is_finite()) {
        return Err(bad("embedding values must be finite", "embedding"));
    }
    let labels = state
        .checkpoint
        .vocab
        .nearest(&req.embedding, req.k)?
        .into_iter()
        .map(|(label, similarity)| ScoredLabel { label, similarity })
        .collect();
    Ok(Json(DecodeResponse { labels }))
}

async fn labels(State(state): State<Arc<AppState>>) -> Json<LabelsResponse> {
    let labels = state.checkpoint.vocab.table.labels().iter().filter(|l| *l != NULL_LABEL).cloned().collect();
    Json(LabelsResponse { labels })
}

async fn health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    Json(HealthResponse { status: "ok".into(), checkpoint_hash: state.checkpoint_hash.clone() })
}

fn cors(origins: &[String]) -> CorsLayer {
    let layer = CorsLayer::new()
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    if origins.is_empty() {
        layer.allow_origin(AllowOrigin::any())
    } else {
        let list = origins.iter().filter_map(|o| o.parse().ok()).collect::<Vec<_>>();
        layer.allow_origin(AllowOrigin::list(list))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = cors(&state.config.cors_origins);
    Router::new()
        .route("/v1/generate", post(generate))
        .route("/v1/generate_conditioned", post(generate_conditioned))
        .route("/v1/decode", post(decode))
        .route("/v1/labels", get(labels))
        .route("/v1/health", get(health))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(&state.config.addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
