//! Class activation maps: weighted channel combination, analytic GAP-head
//! weights, Score-CAM, heatmap rendering and colour overlays.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::{
    bilinear_resize, center_crop, resize_shorter_side, round_u8, GrayImage, ImageError, ImageTensor, RgbImage,
    CROP_SIZE, SHORTER_SIDE,
};
use crate::models::{gap_feature_layer, gap_head, ModelError};
use crate::nn::{softmax, ModelGraph, NnError, Op, Tensor4, WeightStore};

pub const DEFAULT_SCORE_CAM_BATCH: usize = 16;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("layer `{0}` not found")]
    LayerNotFound(String),
    #[error("{0}")]
    Head(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl From<ModelError> for ExplainError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Nn(n) => ExplainError::Nn(n),
            other => ExplainError::Head(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamMethod {
    GapHead,
    ScoreCam,
}

impl CamMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            CamMethod::GapHead => "gap_head",
            CamMethod::ScoreCam => "score_cam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gap_head" => Some(CamMethod::GapHead),
            "score_cam" => Some(CamMethod::ScoreCam),
            _ => None,
        }
    }
}

/// Feature maps of one captured layer for a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    pub layer: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl ActivationStack {
    pub fn new(layer: impl Into<String>, channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, ExplainError> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(ExplainError::Shape(format!(
                "{} values for {channels}x{height}x{width} maps",
                data.len()
            )));
        }
        Ok(Self { layer: layer.into(), channels, height, width, data })
    }

    /// Batch item 0 of a captured tensor.
    pub fn from_tensor(layer: impl Into<String>, t: &Tensor4) -> Result<Self, ExplainError> {
        let item = t.item(0);
        Self::new(layer, t.channels(), t.height(), t.width(), item.into_data())
    }

    pub fn map(&self, k: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[k * hw..(k + 1) * hw]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamWeights {
    pub target_class: usize,
    pub alpha: Vec<f64>,
    pub method: CamMethod,
}

/// Un-normalized CAM at the stack's native resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCam {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Values in `[0, 1]`; the maximum is exactly 1 unless all values are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Heatmap {
    /// 8-bit grayscale, `round(255 * h)`.
    pub fn to_gray(&self) -> GrayImage {
        let px = self.data.iter().map(|&v| round_u8(255.0 * v as f64)).collect();
        GrayImage::new(self.width, self.height, px).expect("heatmap dims")
    }

    pub fn max(&self) -> f32 {
        self.data.iter().cloned().fold(0.0, f32::max)
    }
}

/// `ReLU(sum_k alpha_k * A_k)`.
pub fn cam_combine(stack: &ActivationStack, w: &CamWeights) -> Result<RawCam, ExplainError> {
    if w.alpha.len() != stack.channels {
        return Err(ExplainError::Shape(format!("{} weights for {} maps", w.alpha.len(), stack.channels)));
    }
    let hw = stack.height * stack.width;
    let mut acc = vec![0f64; hw];
    for (k, &a) in w.alpha.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (s, &v) in acc.iter_mut().zip(stack.map(k)) {
            *s += a * v as f64;
        }
    }
    let data = acc.into_iter().map(|v| v.max(0.0) as f32).collect();
    Ok(RawCam { height: stack.height, width: stack.width, data })
}

/// Analytic class-logit gradient for a GAP -> linear head:
/// `alpha_k = W[target, k] / (H * W)`.
pub fn gap_head_weights(g: &ModelGraph, w: &WeightStore, target_class: usize) -> Result<CamWeights, ExplainError> {
    let (pool, fc) = gap_head(g)?;
    let Op::Linear { in_features, out_features } = fc.op else { unreachable!("gap_head checks the op") };
    if target_class >= out_features {
        return Err(ExplainError::InvalidParam(format!("target class {target_class} >= {out_features}")));
    }
    let shapes = g.infer_shapes()?;
    let [c, h, wd] = shapes[pool.inputs[0].as_str()];
    if c != in_features {
        return Err(ExplainError::Head(format!("pooled {c} channels feed a {in_features}-input linear")));
    }
    let weight = &fc.weight_refs[0].name;
    let t = w.get(weight).ok_or_else(|| NnError::MissingWeight { node: fc.id.clone(), name: weight.clone() })?;
    let row = &t.data[target_class * in_features..(target_class + 1) * in_features];
    let hw = (h * wd) as f64;
    Ok(CamWeights {
        target_class,
        alpha: row.iter().map(|&v| v as f64 / hw).collect(),
        method: CamMethod::GapHead,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreCamOptions {
    /// Score only the `k` channels with the largest peak activation.
    pub top_k: Option<usize>,
    pub batch_size: usize,
}

impl Default for ScoreCamOptions {
    fn default() -> Self {
        Self { top_k: None, batch_size: DEFAULT_SCORE_CAM_BATCH }
    }
}

/// Runs the network once and returns the activations of `layer`.
pub fn capture_stack(
    g: &ModelGraph,
    w: &WeightStore,
    input: &ImageTensor,
    layer: &str,
) -> Result<(ActivationStack, Vec<f64>), ExplainError> {
    if g.node(layer).is_none() {
        return Err(ExplainError::LayerNotFound(layer.to_string()));
    }
    let e = g.execute(w, &Tensor4::from(input), &[layer])?;
    let stack = ActivationStack::from_tensor(layer, &e.activations[layer])?;
    Ok((stack, e.logits(0)))
}

/// Channels scored under `top_k`, ascending. Ties in peak activation go to
/// the lower index.
pub fn select_channels(stack: &ActivationStack, top_k: Option<usize>) -> Result<Vec<usize>, ExplainError> {
    let n = stack.channels;
    let k = match top_k {
        None => return Ok((0..n).collect()),
        Some(k) if (1..=n).contains(&k) => k,
        Some(k) => return Err(ExplainError::InvalidParam(format!("top_k {k} outside [1, {n}]"))),
    };
    let peak: Vec<f32> = (0..n).map(|c| stack.map(c).iter().cloned().fold(f32::NEG_INFINITY, f32::max)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| peak[b].total_cmp(&peak[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Upsampled map scaled to `[0, 1]`, or `None` for a constant map.
fn normalized_mask(stack: &ActivationStack, k: usize, h: usize, w: usize) -> Result<Option<Vec<f32>>, ExplainError> {
    let map = ImageTensor::new(1, stack.height, stack.width, stack.map(k).to_vec())?;
    let up = bilinear_resize(&map, h, w)?;
    let (lo, hi) = up.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    if hi <= lo {
        return Ok(None);
    }
    let span = (hi - lo) as f64;
    Ok(Some(up.data().iter().map(|&v| ((v - lo) as f64 / span) as f32).collect()))
}

/// Score-CAM: each selected map, upsampled and min-max normalized, masks the
/// input; the masked forward pass's target-class probability is the weight.
/// Constant maps and unselected channels get weight 0.
pub fn score_cam_weights(
    g: &ModelGraph,
    w: &WeightStore,
    input: &ImageTensor,
    stack: &ActivationStack,
    target_class: usize,
    opts: ScoreCamOptions,
) -> Result<CamWeights, ExplainError> {
    if target_class >= g.num_classes() {
        return Err(ExplainError::InvalidParam(format!("target class {target_class} >= {}", g.num_classes())));
    }
    if opts.batch_size == 0 {
        return Err(ExplainError::InvalidParam("batch size must be at least 1".into()));
    }
    let (c, h, wd) = (input.channels(), input.height(), input.width());
    let hw = h * wd;
    let mut alpha = vec![0f64; stack.channels];
    let mut pending: Vec<(usize, Vec<f32>)> = Vec::new();
    let channels = select_channels(stack, opts.top_k)?;

    let flush = |pending: &mut Vec<(usize, Vec<f32>)>, alpha: &mut [f64]| -> Result<(), ExplainError> {
        if pending.is_empty() {
            return Ok(());
        }
        let mut data = Vec::with_capacity(pending.len() * c * hw);
        for (_, mask) in pending.iter() {
            for ch in 0..c {
                data.extend(input.plane(ch).iter().zip(mask).map(|(&x, &m)| x * m));
            }
        }
        let batch = Tensor4::new([pending.len(), c, h, wd], data)?;
        let e = g.execute(w, &batch, &[])?;
        for (i, (k, _)) in pending.iter().enumerate() {
            alpha[*k] = softmax(&e.logits(i))[target_class];
        }
        pending.clear();
        Ok(())
    };

    for k in channels {
        if let Some(mask) = normalized_mask(stack, k, h, wd)? {
            pending.push((k, mask));
            if pending.len() == opts.batch_size {
                flush(&mut pending, &mut alpha)?;
            }
        }
    }
    flush(&mut pending, &mut alpha)?;
    Ok(CamWeights { target_class, alpha, method: CamMethod::ScoreCam })
}

/// Bilinear upsample, then divide by the maximum when it is positive.
pub fn render_heatmap(raw: &RawCam, out_h: usize, out_w: usize) -> Result<Heatmap, ExplainError> {
    let t = ImageTensor::new(1, raw.height, raw.width, raw.data.clone())?;
    let up = bilinear_resize(&t, out_h, out_w)?;
    let max = up.data().iter().cloned().fold(0f32, f32::max);
    let data = if max > 0.0 {
        up.data().iter().map(|&v| (v.max(0.0) as f64 / max as f64).min(1.0) as f32).collect()
    } else {
        vec![0.0; out_h * out_w]
    };
    Ok(Heatmap { height: out_h, width: out_w, data })
}

const RAMP: [(f64, [f64; 3]); 5] = [
    (0.0, [0.0, 0.0, 255.0]),
    (0.25, [0.0, 255.0, 255.0]),
    (0.5, [0.0, 255.0, 0.0]),
    (0.75, [255.0, 255.0, 0.0]),
    (1.0, [255.0, 0.0, 0.0]),
];

/// Blue, cyan, green, yellow, red piecewise-linear ramp, unrounded.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    for pair in RAMP.windows(2) {
        let ((t0, c0), (t1, c1)) = (pair[0], pair[1]);
        if v <= t1 {
            let f = (v - t0) / (t1 - t0);
            return [0, 1, 2].map(|i| c0[i] + (c1[i] - c0[i]) * f);
        }
    }
    RAMP[4].1
}

/// `(1 - alpha) * gray + alpha * colormap(h)` per channel, rounded half-up.
/// The base image is resized to the heatmap first if needed.
pub fn overlay(h: &Heatmap, img: &GrayImage, alpha: f64) -> Result<RgbImage, ExplainError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ExplainError::InvalidParam(format!("alpha {alpha} outside [0, 1]")));
    }
    let base = bilinear_resize(&img.to_tensor(), h.height, h.width)?;
    let pixels = base
        .data()
        .iter()
        .zip(&h.data)
        .map(|(&g, &v)| {
            let c = colormap(v as f64);
            [0, 1, 2].map(|i| round_u8((1.0 - alpha) * g as f64 + alpha * c[i]))
        })
        .collect();
    Ok(RgbImage { width: h.width, height: h.height, pixels })
}

/// The raw image as the model sees it geometrically: shorter side resized
/// and centre-cropped, without contrast enhancement.
pub fn model_view(img: &GrayImage) -> Result<GrayImage, ExplainError> {
    let resized = resize_shorter_side(&img.to_tensor(), SHORTER_SIDE)?;
    let cropped = center_crop(&resized, CROP_SIZE, CROP_SIZE)?;
    let px = cropped.data().iter().map(|&v| round_u8(v as f64)).collect();
    Ok(GrayImage::new(CROP_SIZE, CROP_SIZE, px)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamRequest {
    pub method: CamMethod,
    /// Defaults to the tensor feeding global average pooling.
    pub layer: Option<String>,
    pub target_class: usize,
    pub top_k: Option<usize>,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct CamResult {
    pub layer: String,
    pub stack: ActivationStack,
    pub weights: CamWeights,
    pub raw: RawCam,
    /// Rendered at the model input resolution.
    pub heatmap: Heatmap,
}

/// Layer a request explains: the GAP input unless a Score-CAM request names
/// another one.
pub fn resolve_layer(g: &ModelGraph, req: &CamRequest) -> Result<String, ExplainError> {
    let default_layer = gap_feature_layer(g);
    match (&req.layer, req.method) {
        (Some(l), CamMethod::GapHead) => {
            let expected = default_layer?;
            if *l != expected {
                return Err(ExplainError::InvalidParam(format!(
                    "gap_head weights apply only to `{expected}`, not `{l}`"
                )));
            }
            Ok(expected)
        }
        (Some(l), CamMethod::ScoreCam) => {
            if g.node(l).is_none() {
                return Err(ExplainError::LayerNotFound(l.clone()));
            }
            Ok(l.clone())
        }
        (None, _) => Ok(default_layer?),
    }
}

/// Channel weights, combination and rendering for an already captured stack.
pub fn cam_from_stack(
    g: &ModelGraph,
    w: &WeightStore,
    input: &ImageTensor,
    stack: ActivationStack,
    req: &CamRequest,
) -> Result<CamResult, ExplainError> {
    let weights = match req.method {
        CamMethod::GapHead => {
            if req.top_k.is_some() {
                return Err(ExplainError::InvalidParam("top_k applies only to score_cam".into()));
            }
            gap_head_weights(g, w, req.target_class)?
        }
        CamMethod::ScoreCam => score_cam_weights(
            g,
            w,
            input,
            &stack,
            req.target_class,
            ScoreCamOptions { top_k: req.top_k, batch_size: req.batch_size },
        )?,
    };
    let raw = cam_combine(&stack, &weights)?;
    let heatmap = render_heatmap(&raw, input.height(), input.width())?;
    Ok(CamResult { layer: stack.layer.clone(), stack, weights, raw, heatmap })
}

/// Captures the layer, computes channel weights and renders the heatmap at
/// the input resolution.
pub fn compute_cam(
    g: &ModelGraph,
    w: &WeightStore,
    input: &ImageTensor,
    req: &CamRequest,
) -> Result<CamResult, ExplainError> {
    let layer = resolve_layer(g, req)?;
    let (stack, _) = capture_stack(g, w, input, &layer)?;
    cam_from_stack(g, w, input, stack, req)
}
