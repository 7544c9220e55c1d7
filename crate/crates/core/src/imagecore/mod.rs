//! Image decoding and the deterministic preprocessing kernels.
//!
//! Pixel data lives in two shapes: [`GrayImage`] holds raw 8-bit intensities
//! as decoded, [`ImageTensor`] holds single-precision channel-major data once
//! the image enters the float pipeline.

mod clahe;
mod codec;
mod pipeline;
mod resize;

pub use clahe::{clahe, clahe_tile_mappings, ClaheParams, TileMappings};
pub use codec::{decode_image, encode_gray_png, encode_rgb_png, RgbImage};
pub use pipeline::{
    center_crop, crop_region, inference_preprocess, inference_stages, resize_shorter_side, PreprocessStages,
    CROP_SIZE, SHORTER_SIDE,
};
pub use resize::bilinear_resize;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed image: {0}")]
    Decode(String),
    #[error("unsupported image format (PNG and JPEG only)")]
    UnsupportedFormat,
    #[error("expected {expected} channel(s), got {actual}")]
    Channel { expected: usize, actual: usize },
    #[error("image {width}x{height} is smaller than the {tiles_x}x{tiles_y} tile grid")]
    Grid {
        width: usize,
        height: usize,
        tiles_x: usize,
        tiles_y: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::InvalidParam("image dimensions must be positive".into()));
        }
        if pixels.len() != width * height {
            return Err(ImageError::InvalidParam(format!(
                "pixel buffer has {} values, expected {}",
                pixels.len(),
                width * height
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels).expect("from_fn dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Raw intensities (0..=255) as a one-channel float tensor.
    pub fn to_tensor(&self) -> ImageTensor {
        ImageTensor {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.pixels.iter().map(|&p| p as f32).collect(),
        }
    }

    /// Rounds and saturates a one-channel tensor back to 8 bits.
    pub fn from_tensor(t: &ImageTensor) -> Result<Self, ImageError> {
        if t.channels != 1 {
            return Err(ImageError::Channel { expected: 1, actual: t.channels });
        }
        let pixels = t.data.iter().map(|&v| round_u8(v as f64)).collect();
        Self::new(t.width, t.height, pixels)
    }
}

/// Round half-up and saturate to `0..=255`.
pub fn round_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Dense float image, channel-major (`data[c][y][x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(ImageError::InvalidParam("tensor dimensions must be positive".into()));
        }
        if data.len() != channels * height * width {
            return Err(ImageError::InvalidParam(format!(
                "tensor buffer has {} values, expected {}",
                data.len(),
                channels * height * width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ImageError::InvalidParam("tensor contains non-finite values".into()));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Per-channel dataset statistics for standardization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl NormalizationStats {
    pub const IMAGENET: NormalizationStats = NormalizationStats {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub fn validate(&self) -> Result<(), ImageError> {
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(ImageError::InvalidParam("normalization std must be positive and finite".into()));
        }
        Ok(())
    }
}

impl Default for NormalizationStats {
    fn default() -> Self {
        Self::IMAGENET
    }
}

/// Min-max scaling of an 8-bit image to `[0, 1]`.
pub fn minmax_scale(img: &GrayImage) -> ImageTensor {
    minmax_scale_tensor(&img.to_tensor())
}

/// Min-max scaling over every value of the tensor. A constant tensor maps to all zeros.
pub fn minmax_scale_tensor(t: &ImageTensor) -> ImageTensor {
    let (lo, hi) = t
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let data = if range > 0.0 {
        t.data.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; t.data.len()]
    };
    ImageTensor { channels: t.channels, height: t.height, width: t.width, data }
}

/// Stacks a one-channel tensor three times along the channel axis.
pub fn replicate_channels(t: &ImageTensor) -> Result<ImageTensor, ImageError> {
    if t.channels != 1 {
        return Err(ImageError::Channel { expected: 1, actual: t.channels });
    }
    let mut data = Vec::with_capacity(t.data.len() * 3);
    for _ in 0..3 {
        data.extend_from_slice(&t.data);
    }
    Ok(ImageTensor { channels: 3, height: t.height, width: t.width, data })
}

/// Per-channel standardization `(x - mean_c) / std_c`.
pub fn channel_normalize(t: &ImageTensor, stats: &NormalizationStats) -> Result<ImageTensor, ImageError> {
    if t.channels != 3 {
        return Err(ImageError::Channel { expected: 3, actual: t.channels });
    }
    stats.validate()?;
    let n = t.height * t.width;
    let mut data = t.data.clone();
    for (c, plane) in data.chunks_mut(n).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for v in plane {
            *v = (*v - m) / s;
        }
    }
    Ok(ImageTensor { channels: 3, height: t.height, width: t.width, data })
}
