//! Request parsing, response bodies and the synchronous classify/explain
//! pipelines shared by the HTTP handlers and the CLI.

use std::time::Instant;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::evalmetrics::argmax;
use crate::explain::{cam_from_stack, capture_stack, model_view, resolve_layer, CamMethod, CamRequest, ExplainError};
use crate::nn::softmax;
use crate::imagecore::{
    decode_image, encode_gray_png, encode_rgb_png, inference_preprocess, ClaheParams, GrayImage, ImageError,
    ImageTensor, NormalizationStats, CROP_SIZE, SHORTER_SIDE,
};
use crate::models::{Model, ModelError};

pub const CLIP_RANGE: (f64, f64) = (0.0, 8.0);
pub const GRID_RANGE: (usize, usize) = (2, 16);
pub const DEFAULT_OVERLAY_ALPHA: f64 = 0.5;

/// Error body `{"error": {"code", "message"}}` with its HTTP status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    pub fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn unavailable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "model_unavailable", message)
    }

    pub fn body(&self) -> serde_json::Value {
        serde_json::json!({ "error": { "code": self.code, "message": self.message } })
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({}): {}", self.code, self.status.as_u16(), self.message)
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}

impl From<ImageError> for ApiError {
    fn from(e: ImageError) -> Self {
        match e {
            ImageError::UnsupportedFormat => {
                ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, "unsupported_image_format", e.to_string())
            }
            ImageError::Decode(_) => ApiError::bad_request("malformed_image", e.to_string()),
            ImageError::Grid { .. } => ApiError::bad_request("image_too_small", e.to_string()),
            _ => ApiError::bad_request("invalid_parameter", e.to_string()),
        }
    }
}

impl From<ExplainError> for ApiError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::Image(i) => i.into(),
            ExplainError::LayerNotFound(_) | ExplainError::InvalidParam(_) | ExplainError::Head(_) => {
                ApiError::bad_request("invalid_parameter", e.to_string())
            }
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", other.to_string()),
        }
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string())
    }
}

/// Whitelisted preprocessing overrides.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub clahe_clip: Option<f64>,
    pub clahe_grid: Option<[usize; 2]>,
}

impl Overrides {
    /// Applies the overrides to `base`, rejecting anything outside
    /// `clip in (0, 8]` and `grid in [2, 16]^2`.
    pub fn apply(&self, base: &ClaheParams) -> Result<ClaheParams, ApiError> {
        let mut p = *base;
        if let Some(clip) = self.clahe_clip {
            if !(clip > CLIP_RANGE.0 && clip <= CLIP_RANGE.1) {
                return Err(ApiError::bad_request(
                    "override_out_of_range",
                    format!("clahe_clip {clip} outside (0, 8]"),
                ));
            }
            p.clip_limit = clip;
        }
        if let Some([gx, gy]) = self.clahe_grid {
            let ok = |v: usize| (GRID_RANGE.0..=GRID_RANGE.1).contains(&v);
            if !ok(gx) || !ok(gy) {
                return Err(ApiError::bad_request(
                    "override_out_of_range",
                    format!("clahe_grid [{gx}, {gy}] outside [2, 16]"),
                ));
            }
            p.grid = (gx, gy);
        }
        Ok(p)
    }
}

/// Explain-only request fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainParams {
    pub method: Option<String>,
    pub layer: Option<String>,
    pub top_k: Option<usize>,
    pub alpha: Option<f64>,
    pub target: Option<String>,
}

/// JSON request body. Multipart requests carry the same fields as form parts
/// with the image in part `image`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonRequest {
    pub image_b64: String,
    pub clahe_clip: Option<f64>,
    pub clahe_grid: Option<[usize; 2]>,
    pub method: Option<String>,
    pub layer: Option<String>,
    pub top_k: Option<usize>,
    pub alpha: Option<f64>,
    pub target: Option<String>,
}

impl JsonRequest {
    pub fn overrides(&self) -> Overrides {
        Overrides { clahe_clip: self.clahe_clip, clahe_grid: self.clahe_grid }
    }

    pub fn explain_params(&self) -> ExplainParams {
        ExplainParams {
            method: self.method.clone(),
            layer: self.layer.clone(),
            top_k: self.top_k,
            alpha: self.alpha,
            target: self.target.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessingEcho {
    pub clahe_clip: f64,
    pub clahe_grid: [usize; 2],
    pub shorter_side: usize,
    pub crop_size: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl PreprocessingEcho {
    pub fn new(p: &ClaheParams, s: &NormalizationStats) -> Self {
        Self {
            clahe_clip: p.clip_limit,
            clahe_grid: [p.grid.0, p.grid.1],
            shorter_side: SHORTER_SIDE,
            crop_size: CROP_SIZE,
            mean: s.mean,
            std: s.std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub probabilities: IndexMap<String, f64>,
    pub predicted: String,
    pub model: String,
    pub preprocessing: PreprocessingEcho,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamEcho {
    pub method: CamMethod,
    pub layer: String,
    pub top_k: Option<usize>,
    pub target: String,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainResponse {
    #[serde(flatten)]
    pub classification: ClassifyResponse,
    pub heatmap_png: String,
    pub overlay_png: String,
    pub cam: CamEcho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub architecture: String,
    pub class_labels: Vec<String>,
    pub parameter_count: u64,
    pub flops: u64,
    pub weight_file_digest: String,
}

impl ModelInfo {
    pub fn of(model: &Model) -> Result<Self, ApiError> {
        Ok(Self {
            architecture: model.graph.architecture.clone(),
            class_labels: model.graph.class_labels.clone(),
            parameter_count: model.graph.count_params(),
            flops: model.graph.count_flops().map_err(ModelError::from)?,
            weight_file_digest: model.digest.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub uptime_s: f64,
}

pub fn decode_b64(s: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(s.trim()).map_err(|e| ApiError::bad_request("malformed_request", format!("image_b64: {e}")))
}

pub fn encode_b64(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

/// Decoded image plus the model input tensor.
pub struct Prepared {
    pub image: GrayImage,
    pub input: ImageTensor,
    pub clahe: ClaheParams,
}

pub fn prepare(
    bytes: &[u8],
    overrides: &Overrides,
    base: &ClaheParams,
    stats: &NormalizationStats,
) -> Result<Prepared, ApiError> {
    let clahe = overrides.apply(base)?;
    let image = decode_image(bytes)?;
    let input = inference_preprocess(&image, &clahe, stats)?;
    Ok(Prepared { image, input, clahe })
}

fn build_classification(
    model: &Model,
    probs: &[f64],
    clahe: &ClaheParams,
    stats: &NormalizationStats,
    started: Instant,
) -> ClassifyResponse {
    let labels = &model.graph.class_labels;
    ClassifyResponse {
        probabilities: labels.iter().cloned().zip(probs.iter().copied()).collect(),
        predicted: labels[argmax(probs)].clone(),
        model: model.graph.architecture.clone(),
        preprocessing: PreprocessingEcho::new(clahe, stats),
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    }
}

/// Decode, preprocess, forward and softmax.
pub fn classify_bytes(
    model: &Model,
    bytes: &[u8],
    overrides: &Overrides,
    base: &ClaheParams,
    stats: &NormalizationStats,
) -> Result<ClassifyResponse, ApiError> {
    let started = Instant::now();
    let prep = prepare(bytes, overrides, base, stats)?;
    let probs = model.predict(&prep.input)?;
    Ok(build_classification(model, &probs, &prep.clahe, stats, started))
}

/// Validated explain settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainSettings {
    pub method: CamMethod,
    pub layer: Option<String>,
    pub top_k: Option<usize>,
    pub alpha: f64,
    pub target: Option<usize>,
}

impl ExplainSettings {
    pub fn parse(p: &ExplainParams, labels: &[String]) -> Result<Self, ApiError> {
        let method = match p.method.as_deref() {
            None => CamMethod::GapHead,
            Some(m) => CamMethod::parse(m).ok_or_else(|| {
                ApiError::bad_request("unsupported_method", format!("method `{m}` is not one of gap_head, score_cam"))
            })?,
        };
        let alpha = p.alpha.unwrap_or(DEFAULT_OVERLAY_ALPHA);
        if !(0.0..=1.0).contains(&alpha) {
            return Err(ApiError::bad_request("invalid_parameter", format!("alpha {alpha} outside [0, 1]")));
        }
        if p.top_k == Some(0) {
            return Err(ApiError::bad_request("invalid_parameter", "top_k must be at least 1"));
        }
        if p.top_k.is_some() && method != CamMethod::ScoreCam {
            return Err(ApiError::bad_request("invalid_parameter", "top_k applies only to score_cam"));
        }
        let target = match &p.target {
            None => None,
            Some(t) => Some(
                labels
                    .iter()
                    .position(|l| l == t)
                    .ok_or_else(|| ApiError::bad_request("invalid_parameter", format!("unknown target `{t}`")))?,
            ),
        };
        Ok(Self { method, layer: p.layer.clone(), top_k: p.top_k, alpha, target })
    }
}

/// Classification plus a CAM for the predicted (or requested) class,
/// rendered at the model input resolution.
pub fn explain_bytes(
    model: &Model,
    bytes: &[u8],
    overrides: &Overrides,
    settings: &ExplainSettings,
    base: &ClaheParams,
    stats: &NormalizationStats,
    score_cam_batch: usize,
) -> Result<ExplainResponse, ApiError> {
    let started = Instant::now();
    let prep = prepare(bytes, overrides, base, stats)?;
    let mut req = CamRequest {
        method: settings.method,
        layer: settings.layer.clone(),
        target_class: 0,
        top_k: settings.top_k,
        batch_size: score_cam_batch,
    };
    // one forward pass yields both the prediction and the feature maps
    let layer = resolve_layer(&model.graph, &req)?;
    let (stack, logits) = capture_stack(&model.graph, &model.weights, &prep.input, &layer)?;
    let probs = softmax(&logits);
    req.target_class = settings.target.unwrap_or_else(|| argmax(&probs));
    let cam = cam_from_stack(&model.graph, &model.weights, &prep.input, stack, &req)?;
    let base_view = model_view(&prep.image)?;
    let overlay = crate::explain::overlay(&cam.heatmap, &base_view, settings.alpha)?;
    let classification = build_classification(model, &probs, &prep.clahe, stats, started);
    Ok(ExplainResponse {
        heatmap_png: encode_b64(&encode_gray_png(&cam.heatmap.to_gray())),
        overlay_png: encode_b64(&encode_rgb_png(&overlay)),
        cam: CamEcho {
            method: settings.method,
            layer: cam.layer,
            top_k: settings.top_k,
            target: model.graph.class_labels[req.target_class].clone(),
            alpha: settings.alpha,
        },
        classification: ClassifyResponse { latency_ms: started.elapsed().as_secs_f64() * 1e3, ..classification },
    })
}
