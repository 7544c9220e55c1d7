//! Seeded training-time augmentation.
//!
//! Every transform takes the generator by `&mut` and consumes a fixed number
//! of draws, so one seed reproduces the same image anywhere. Draw order:
//!
//! * crop: per attempt, area fraction then aspect ratio; on success, top then
//!   left. At most 10 attempts.
//! * perspective: one gate draw; if the gate passes, eight corner draws
//!   (x then y for top-left, top-right, bottom-right, bottom-left).
//! * rotation: one angle draw.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::{
    bilinear_resize, channel_normalize, clahe, minmax_scale_tensor, replicate_channels, resize_shorter_side,
    ClaheParams, GrayImage, ImageError, ImageTensor, NormalizationStats, SHORTER_SIDE,
};
use crate::rng::{derive_seed, RngState};

const CROP_ATTEMPTS: usize = 10;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error("perspective system is singular")]
    SingularTransform,
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the image area.
    pub crop_area_ratio: (f64, f64),
    /// Crop width / height.
    pub aspect_ratio: (f64, f64),
    pub out_size: usize,
    pub perspective_distortion: f64,
    pub perspective_prob: f64,
    pub rotation_degrees: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_area_ratio: (0.4, 0.8),
            aspect_ratio: (3.0 / 4.0, 4.0 / 3.0),
            out_size: 224,
            perspective_distortion: 0.4,
            perspective_prob: 0.6,
            rotation_degrees: (-45.0, 45.0),
        }
    }
}

impl AugmentConfig {
    /// Parameters under which every transform is an identity.
    pub fn identity(out_size: usize) -> Self {
        Self {
            crop_area_ratio: (1.0, 1.0),
            aspect_ratio: (1.0, 1.0),
            out_size,
            perspective_distortion: 0.0,
            perspective_prob: 0.0,
            rotation_degrees: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::InvalidConfig(m));
        let (lo, hi) = self.crop_area_ratio;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop_area_ratio ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"));
        }
        let (lo, hi) = self.aspect_ratio;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("aspect_ratio ({lo}, {hi}) must satisfy 0 < lo <= hi"));
        }
        if self.out_size == 0 {
            return bad("out_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.perspective_prob) {
            return bad(format!("perspective_prob {} outside [0, 1]", self.perspective_prob));
        }
        if !(0.0..=1.0).contains(&self.perspective_distortion) {
            return bad(format!("perspective_distortion {} outside [0, 1]", self.perspective_distortion));
        }
        let (lo, hi) = self.rotation_degrees;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad(format!("rotation_degrees ({lo}, {hi}) must be finite with lo <= hi"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Samples a crop rectangle for an `h` x `w` image, falling back to the
/// largest centred square when 10 attempts do not fit.
pub fn sample_crop_rect(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut RngState) -> CropRect {
    let area = (h * w) as f64;
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.next_uniform(cfg.crop_area_ratio.0, cfg.crop_area_ratio.1);
        let aspect = rng.next_uniform(cfg.aspect_ratio.0, cfg.aspect_ratio.1);
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.next_below((h - ch + 1) as u64) as usize;
            let left = rng.next_below((w - cw + 1) as u64) as usize;
            return CropRect { top, left, height: ch, width: cw };
        }
    }
    let side = h.min(w);
    CropRect { top: (h - side) / 2, left: (w - side) / 2, height: side, width: side }
}

pub fn random_resized_crop(
    t: &ImageTensor,
    cfg: &AugmentConfig,
    rng: &mut RngState,
) -> Result<ImageTensor, AugmentError> {
    let r = sample_crop_rect(t.height(), t.width(), cfg, rng);
    let cropped = crate::imagecore::crop_region(t, r.top, r.left, r.height, r.width)?;
    Ok(bilinear_resize(&cropped, cfg.out_size, cfg.out_size)?)
}

/// Corner destinations `[tl, tr, br, bl]` as `(x, y)` pixel coordinates.
pub type Quad = [(f64, f64); 4];

pub fn image_corners(h: usize, w: usize) -> Quad {
    let (r, b) = ((w - 1) as f64, (h - 1) as f64);
    [(0.0, 0.0), (r, 0.0), (r, b), (0.0, b)]
}

/// Gate draw, then inward corner displacements of up to
/// `distortion * side / 2`. `None` when the gate rejects.
pub fn sample_perspective_corners(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut RngState) -> Option<Quad> {
    if rng.next_f64() >= cfg.perspective_prob {
        return None;
    }
    let mx = cfg.perspective_distortion * w as f64 / 2.0;
    let my = cfg.perspective_distortion * h as f64 / 2.0;
    let sign = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
    let mut quad = image_corners(h, w);
    for (corner, (sx, sy)) in quad.iter_mut().zip(sign) {
        let dx = rng.next_uniform(0.0, mx);
        let dy = rng.next_uniform(0.0, my);
        corner.0 += sx * dx;
        corner.1 += sy * dy;
    }
    Some(quad)
}

/// Solves for the 3x3 homography (last entry 1) taking each `src[i]` to `dst[i]`.
pub fn solve_homography(src: &Quad, dst: &Quad) -> Result<[f64; 9], AugmentError> {
    let mut a = [[0f64; 9]; 8];
    for (i, (&(x, y), &(u, v))) in src.iter().zip(dst).enumerate() {
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    let scale = a.iter().flat_map(|r| r[..8].iter()).fold(0f64, |m, v| m.max(v.abs())).max(1.0);
    for col in 0..8 {
        let piv = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).expect("rows");
        if a[piv][col].abs() < 1e-12 * scale {
            return Err(AugmentError::SingularTransform);
        }
        a.swap(col, piv);
        for r in 0..8 {
            if r != col {
                let f = a[r][col] / a[col][col];
                if f != 0.0 {
                    for k in col..9 {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    let mut h = [0f64; 9];
    for i in 0..8 {
        h[i] = a[i][8] / a[i][i];
    }
    h[8] = 1.0;
    Ok(h)
}

/// Bilinear sample of one plane at `(x, y)`; neighbours outside the image
/// contribute zero.
#[inline]
fn sample_zero(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    if !(x > -1.0 && y > -1.0 && x < w as f64 && y < h as f64) {
        return 0.0;
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let px = |xi: isize, yi: isize| -> f64 {
        if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
            plane[yi as usize * w + xi as usize] as f64
        } else {
            0.0
        }
    };
    let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
    let bot = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

/// Inverse-warps `t` with `map(x, y) -> source (x, y)` for every output pixel.
fn warp_with(t: &ImageTensor, map: impl Fn(f64, f64) -> (f64, f64)) -> Result<ImageTensor, ImageError> {
    let (h, w) = (t.height(), t.width());
    let mut data = Vec::with_capacity(t.data().len());
    for c in 0..t.channels() {
        let plane = t.plane(c);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = map(x as f64, y as f64);
                data.push(sample_zero(plane, h, w, sx, sy));
            }
        }
    }
    ImageTensor::new(t.channels(), h, w, data)
}

/// Warps `t` so its corners land on `quad`; uncovered pixels are 0.
pub fn warp_perspective(t: &ImageTensor, quad: &Quad) -> Result<ImageTensor, AugmentError> {
    let corners = image_corners(t.height(), t.width());
    if *quad == corners {
        return Ok(t.clone());
    }
    // output -> source
    let m = solve_homography(quad, &corners)?;
    Ok(warp_with(t, |x, y| {
        let d = m[6] * x + m[7] * y + m[8];
        ((m[0] * x + m[1] * y + m[2]) / d, (m[3] * x + m[4] * y + m[5]) / d)
    })?)
}

pub fn random_perspective(
    t: &ImageTensor,
    cfg: &AugmentConfig,
    rng: &mut RngState,
) -> Result<ImageTensor, AugmentError> {
    match sample_perspective_corners(t.height(), t.width(), cfg, rng) {
        None => Ok(t.clone()),
        Some(quad) => match warp_perspective(t, &quad) {
            Err(AugmentError::SingularTransform) => {
                log::warn!("singular perspective transform for corners {quad:?}; leaving image unchanged");
                Ok(t.clone())
            }
            other => other,
        },
    }
}

/// Rotates counter-clockwise (as displayed, y pointing down) about the
/// image centre, keeping the canvas size.
pub fn rotate(t: &ImageTensor, degrees: f64) -> Result<ImageTensor, AugmentError> {
    if degrees == 0.0 {
        return Ok(t.clone());
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = (t.width() - 1) as f64 / 2.0;
    let cy = (t.height() - 1) as f64 / 2.0;
    Ok(warp_with(t, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + c * dx - s * dy, cy + s * dx + c * dy)
    })?)
}

pub fn sample_rotation(cfg: &AugmentConfig, rng: &mut RngState) -> f64 {
    rng.next_uniform(cfg.rotation_degrees.0, cfg.rotation_degrees.1)
}

pub fn random_rotation(
    t: &ImageTensor,
    cfg: &AugmentConfig,
    rng: &mut RngState,
) -> Result<ImageTensor, AugmentError> {
    let angle = sample_rotation(cfg, rng);
    rotate(t, angle)
}

/// CLAHE, shorter-side resize, random crop, perspective and rotation on the
/// single-channel tensor, then scaling, replication and standardization.
pub fn train_transform(
    img: &GrayImage,
    p: &ClaheParams,
    s: &NormalizationStats,
    cfg: &AugmentConfig,
    rng: &mut RngState,
) -> Result<ImageTensor, AugmentError> {
    cfg.validate()?;
    let enhanced = clahe(img, p)?;
    let resized = resize_shorter_side(&enhanced.to_tensor(), SHORTER_SIDE)?;
    let cropped = random_resized_crop(&resized, cfg, rng)?;
    let warped = random_perspective(&cropped, cfg, rng)?;
    let rotated = random_rotation(&warped, cfg, rng)?;
    let scaled = minmax_scale_tensor(&rotated);
    Ok(channel_normalize(&replicate_channels(&scaled)?, s)?)
}

/// Applies [`train_transform`] to every image in parallel, image `i` drawing
/// from `RngState::new(derive_seed(base_seed, i))`. Output order matches input.
pub fn train_transform_batch(
    images: &[GrayImage],
    p: &ClaheParams,
    s: &NormalizationStats,
    cfg: &AugmentConfig,
    base_seed: u64,
) -> Result<Vec<ImageTensor>, AugmentError> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| train_transform(img, p, s, cfg, &mut RngState::new(derive_seed(base_seed, i as u64))))
        .collect()
}
