//! HTTP service hosting one model.
//!
//! Routes: `POST /v1/classify`, `POST /v1/explain`, `GET /v1/model`,
//! `GET /healthz`. Requests carry the image either as multipart part `image`
//! (other fields as text parts) or as JSON field `image_b64`. Errors are
//! `{"error": {"code", "message"}}`.

mod api;

pub use api::{
    classify_bytes, decode_b64, encode_b64, explain_bytes, prepare, ApiError, CamEcho, ClassifyResponse,
    ExplainParams, ExplainResponse, ExplainSettings, Health, JsonRequest, ModelInfo, Overrides, PreprocessingEcho,
    Prepared, CLIP_RANGE, DEFAULT_OVERLAY_ALPHA, GRID_RANGE,
};

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::explain::{CamMethod, DEFAULT_SCORE_CAM_BATCH};
use crate::imagecore::{ClaheParams, NormalizationStats};
use crate::models::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub model_path: Option<PathBuf>,
    pub host: String,
    pub port: u16,
    pub max_body_mb: usize,
    pub scorecam_batch: usize,
    /// Score-CAM requests allowed to run at once.
    pub scorecam_concurrency: usize,
    /// Allowed CORS origins; empty allows any origin.
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            model_path: None,
            host: "0.0.0.0".into(),
            port: 8080,
            max_body_mb: 20,
            scorecam_batch: DEFAULT_SCORE_CAM_BATCH,
            scorecam_concurrency: 1,
            cors_origins: Vec::new(),
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_body_mb == 0 {
            return Err("max_body_mb must be at least 1".into());
        }
        if self.scorecam_batch == 0 {
            return Err("scorecam_batch must be at least 1".into());
        }
        if self.scorecam_concurrency == 0 {
            return Err("scorecam_concurrency must be at least 1".into());
        }
        Ok(())
    }

    pub fn max_image_bytes(&self) -> usize {
        self.max_body_mb * 1024 * 1024
    }
}

/// Immutable shared state: the model (or why it failed to load) and the
/// preprocessing defaults.
pub struct AppState {
    model: Result<Arc<Model>, String>,
    info: Option<ModelInfo>,
    config: ServiceConfig,
    clahe: ClaheParams,
    stats: NormalizationStats,
    started: Instant,
    score_cam_gate: Semaphore,
}

impl AppState {
    pub fn new(
        model: Result<Model, String>,
        config: ServiceConfig,
        clahe: ClaheParams,
        stats: NormalizationStats,
    ) -> Arc<Self> {
        let model = model.map(Arc::new);
        let info = model.as_ref().ok().and_then(|m| ModelInfo::of(m).ok());
        if let Err(e) = &model {
            log::error!("model not loaded, serving in degraded mode: {e}");
        }
        Arc::new(Self {
            model,
            info,
            score_cam_gate: Semaphore::new(config.scorecam_concurrency.max(1)),
            config,
            clahe,
            stats,
            started: Instant::now(),
        })
    }

    /// Loads `config.model_path`; a missing or corrupt file yields a
    /// degraded state instead of an error.
    pub fn load(config: ServiceConfig, clahe: ClaheParams, stats: NormalizationStats) -> Arc<Self> {
        let model = match &config.model_path {
            None => Err("no model path configured".to_string()),
            Some(p) => Model::load(p).map_err(|e| format!("{}: {e}", p.display())),
        };
        Self::new(model, config, clahe, stats)
    }

    pub fn is_ready(&self) -> bool {
        self.model.is_ok()
    }

    fn model(&self) -> Result<Arc<Model>, ApiError> {
        self.model.clone().map_err(ApiError::unavailable)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    // base64 inflates by 4/3; leave room for the other fields
    let body_limit = state.config.max_image_bytes() / 3 * 4 + 64 * 1024;
    let cors = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    let cors = if state.config.cors_origins.is_empty() {
        cors.allow_origin(Any)
    } else {
        let origins: Vec<HeaderValue> =
            state.config.cors_origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
        cors.allow_origin(AllowOrigin::list(origins))
    };
    Router::new()
        .route("/v1/classify", post(classify))
        .route("/v1/explain", post(explain))
        .route("/v1/model", get(model_info))
        .route("/healthz", get(health))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .layer(DefaultBodyLimit::max(body_limit))
        .layer(cors)
        .with_state(state)
}

/// Binds `host:port` and serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>) -> std::io::Result<()> {
    let addr: SocketAddr = format!("{}:{}", state.config.host, state.config.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bad listen address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

struct Upload {
    image: Vec<u8>,
    json: JsonRequest,
}

fn too_large(limit_mb: usize) -> ApiError {
    ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", format!("image exceeds {limit_mb} MB"))
}

fn text_field<T: std::str::FromStr>(name: &str, v: &str) -> Result<T, ApiError> {
    v.trim().parse().map_err(|_| ApiError::bad_request("malformed_request", format!("field `{name}` is not valid")))
}

async fn read_upload(state: &AppState, req: Request) -> Result<Upload, ApiError> {
    let limit_mb = state.config.max_body_mb;
    let ctype = req.headers().get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()).unwrap_or("").to_string();
    let upload = if ctype.starts_with("multipart/form-data") {
        let mut mp = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request("malformed_request", e.body_text()))?;
        let mut image = None;
        let mut json = JsonRequest::default();
        loop {
            let field = match mp.next_field().await {
                Ok(Some(f)) => f,
                Ok(None) => break,
                Err(e) if e.status() == StatusCode::PAYLOAD_TOO_LARGE => return Err(too_large(limit_mb)),
                Err(e) => return Err(ApiError::bad_request("malformed_request", e.body_text())),
            };
            let name = field.name().unwrap_or("").to_string();
            let read_err = |e: axum::extract::multipart::MultipartError| {
                if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
                    too_large(limit_mb)
                } else {
                    ApiError::bad_request("malformed_request", e.body_text())
                }
            };
            if name == "image" {
                if image.is_some() {
                    return Err(ApiError::bad_request("malformed_request", "more than one `image` part"));
                }
                image = Some(field.bytes().await.map_err(read_err)?.to_vec());
                continue;
            }
            let v = field.text().await.map_err(read_err)?;
            match name.as_str() {
                "clahe_clip" => json.clahe_clip = Some(text_field(&name, &v)?),
                "clahe_grid" => {
                    let parts: Vec<usize> =
                        v.split(',').map(|p| text_field(&name, p)).collect::<Result<_, _>>()?;
                    let [gx, gy] = parts[..] else {
                        return Err(ApiError::bad_request("malformed_request", "clahe_grid must be `x,y`"));
                    };
                    json.clahe_grid = Some([gx, gy]);
                }
                "method" => json.method = Some(v),
                "layer" => json.layer = Some(v),
                "top_k" => json.top_k = Some(text_field(&name, &v)?),
                "alpha" => json.alpha = Some(text_field(&name, &v)?),
                "target" => json.target = Some(v),
                other => {
                    return Err(ApiError::bad_request("malformed_request", format!("unknown field `{other}`")));
                }
            }
        }
        let image = image.ok_or_else(|| ApiError::bad_request("malformed_request", "missing `image` part"))?;
        Upload { image, json }
    } else if ctype.starts_with("application/json") {
        let bytes = axum::body::Bytes::from_request(req, &()).await.map_err(|e| {
            if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
                too_large(limit_mb)
            } else {
                ApiError::bad_request("malformed_request", e.body_text())
            }
        })?;
        let json: JsonRequest = serde_json::from_slice(&bytes)
            .map_err(|e| ApiError::bad_request("malformed_request", format!("invalid JSON body: {e}")))?;
        let image = decode_b64(&json.image_b64)?;
        Upload { image, json }
    } else {
        return Err(ApiError::bad_request(
            "malformed_request",
            "expected multipart/form-data or application/json",
        ));
    };
    if upload.image.len() > state.config.max_image_bytes() {
        return Err(too_large(limit_mb));
    }
    Ok(upload)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string()))?
}

async fn classify(State(state): State<Arc<AppState>>, req: Request) -> Response {
    let run = async {
        let model = state.model()?;
        let up = read_upload(&state, req).await?;
        let overrides = up.json.overrides();
        if up.json.explain_params() != ExplainParams::default() {
            return Err(ApiError::bad_request("malformed_request", "explain fields are not accepted by /v1/classify"));
        }
        let (clahe, stats) = (state.clahe, state.stats);
        blocking(move || classify_bytes(&model, &up.image, &overrides, &clahe, &stats)).await
    };
    match run.await {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn explain(State(state): State<Arc<AppState>>, req: Request) -> Response {
    let run = async {
        let model = state.model()?;
        let up = read_upload(&state, req).await?;
        let settings = ExplainSettings::parse(&up.json.explain_params(), &model.graph.class_labels)?;
        let overrides = up.json.overrides();
        let _permit = if settings.method == CamMethod::ScoreCam {
            Some(state.score_cam_gate.acquire().await.expect("semaphore never closed"))
        } else {
            None
        };
        let (clahe, stats, batch) = (state.clahe, state.stats, state.config.scorecam_batch);
        blocking(move || explain_bytes(&model, &up.image, &overrides, &settings, &clahe, &stats, batch)).await
    };
    match run.await {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn model_info(State(state): State<Arc<AppState>>) -> Response {
    match (state.model(), &state.info) {
        (Ok(_), Some(info)) => Json(info.clone()).into_response(),
        (Ok(_), None) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", "model info unavailable")
            .into_response(),
        (Err(e), _) => e.into_response(),
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    let uptime_s = state.started.elapsed().as_secs_f64();
    if state.is_ready() {
        Json(Health { status: "ok".into(), uptime_s }).into_response()
    } else {
        (StatusCode::SERVICE_UNAVAILABLE, Json(Health { status: "degraded".into(), uptime_s })).into_response()
    }
}
