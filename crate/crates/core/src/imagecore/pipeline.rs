use super::{
    bilinear_resize, channel_normalize, clahe, minmax_scale_tensor, replicate_channels, ClaheParams, GrayImage,
    ImageError, ImageTensor, NormalizationStats,
};

pub const SHORTER_SIDE: usize = 256;
pub const CROP_SIZE: usize = 224;

/// Output size that brings the shorter side to `side` and keeps the aspect
/// ratio, longer side rounded half-up.
pub fn shorter_side_dims(h: usize, w: usize, side: usize) -> (usize, usize) {
    let scaled = |long: usize, short: usize| ((2 * long * side + short) / (2 * short)).max(1);
    if h <= w {
        (side, scaled(w, h))
    } else {
        (scaled(h, w), side)
    }
}

pub fn resize_shorter_side(t: &ImageTensor, side: usize) -> Result<ImageTensor, ImageError> {
    let (h, w) = shorter_side_dims(t.height(), t.width(), side);
    bilinear_resize(t, h, w)
}

/// Centre crop with the offset floored toward the top-left.
pub fn center_crop(t: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor, ImageError> {
    if out_h > t.height() || out_w > t.width() || out_h == 0 || out_w == 0 {
        return Err(ImageError::InvalidParam(format!(
            "cannot crop {}x{} from {}x{}",
            out_h,
            out_w,
            t.height(),
            t.width()
        )));
    }
    let top = (t.height() - out_h) / 2;
    let left = (t.width() - out_w) / 2;
    crop_region(t, top, left, out_h, out_w)
}

/// Copies the `h` x `w` window whose top-left pixel is `(top, left)`.
pub fn crop_region(t: &ImageTensor, top: usize, left: usize, h: usize, w: usize) -> Result<ImageTensor, ImageError> {
    if h == 0 || w == 0 || top + h > t.height() || left + w > t.width() {
        return Err(ImageError::InvalidParam(format!(
            "window {h}x{w} at ({top}, {left}) outside {}x{}",
            t.height(),
            t.width()
        )));
    }
    let mut data = Vec::with_capacity(t.channels() * h * w);
    for c in 0..t.channels() {
        let plane = t.plane(c);
        for y in top..top + h {
            data.extend_from_slice(&plane[y * t.width() + left..y * t.width() + left + w]);
        }
    }
    ImageTensor::new(t.channels(), h, w, data)
}

/// Every intermediate of the evaluation pipeline, in order.
#[derive(Debug, Clone)]
pub struct PreprocessStages {
    /// 1: CLAHE on raw 8-bit pixels
    pub clahe: GrayImage,
    /// 2: shorter side resized to 256 (intensities still 0..=255)
    pub resized: ImageTensor,
    /// 3: centre crop 224x224
    pub cropped: ImageTensor,
    /// 4: min-max scaled to [0, 1]
    pub scaled: ImageTensor,
    /// 5: replicated to three channels
    pub replicated: ImageTensor,
    /// 6: per-channel standardized model input
    pub normalized: ImageTensor,
}

impl PreprocessStages {
    pub const COUNT: usize = 6;

    /// Tensor after stage `n` (1-based); stage 1 is returned as raw intensities.
    pub fn stage(&self, n: usize) -> Option<ImageTensor> {
        match n {
            1 => Some(self.clahe.to_tensor()),
            2 => Some(self.resized.clone()),
            3 => Some(self.cropped.clone()),
            4 => Some(self.scaled.clone()),
            5 => Some(self.replicated.clone()),
            6 => Some(self.normalized.clone()),
            _ => None,
        }
    }

    pub fn stage_name(n: usize) -> &'static str {
        match n {
            1 => "clahe",
            2 => "resize",
            3 => "center_crop",
            4 => "minmax_scale",
            5 => "replicate_channels",
            6 => "channel_normalize",
            _ => "unknown",
        }
    }
}

/// CLAHE, shorter-side resize, centre crop, min-max scale, channel
/// replication and standardization.
pub fn inference_stages(
    img: &GrayImage,
    p: &ClaheParams,
    s: &NormalizationStats,
) -> Result<PreprocessStages, ImageError> {
    let clahe = clahe(img, p)?;
    let resized = resize_shorter_side(&clahe.to_tensor(), SHORTER_SIDE)?;
    let cropped = center_crop(&resized, CROP_SIZE, CROP_SIZE)?;
    let scaled = minmax_scale_tensor(&cropped);
    let replicated = replicate_channels(&scaled)?;
    let normalized = channel_normalize(&replicated, s)?;
    Ok(PreprocessStages { clahe, resized, cropped, scaled, replicated, normalized })
}

pub fn inference_preprocess(
    img: &GrayImage,
    p: &ClaheParams,
    s: &NormalizationStats,
) -> Result<ImageTensor, ImageError> {
    inference_stages(img, p, s).map(|st| st.normalized)
}
