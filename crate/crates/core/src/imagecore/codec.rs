use std::io::Cursor;

use image::{DynamicImage, ImageFormat};

use super::{GrayImage, ImageError};

/// Decodes PNG or JPEG bytes to 8-bit grayscale.
///
/// Colour inputs use `round(0.299 R + 0.587 G + 0.114 B)`; 16-bit inputs are
/// rescaled with `round(v * 255 / 65535)`, rounding half-up. Alpha is dropped.
pub fn decode_image(bytes: &[u8]) -> Result<GrayImage, ImageError> {
    let format = image::guess_format(bytes).map_err(|_| ImageError::UnsupportedFormat)?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(ImageError::UnsupportedFormat);
    }
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| ImageError::Decode(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<u8> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw(),
        DynamicImage::ImageLumaA8(b) => b.into_raw().chunks_exact(2).map(|p| p[0]).collect(),
        DynamicImage::ImageRgb8(b) => b.into_raw().chunks_exact(3).map(|p| luma8(p[0], p[1], p[2])).collect(),
        DynamicImage::ImageRgba8(b) => b.into_raw().chunks_exact(4).map(|p| luma8(p[0], p[1], p[2])).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(scale16).collect(),
        DynamicImage::ImageLumaA16(b) => b.into_raw().chunks_exact(2).map(|p| scale16(p[0])).collect(),
        DynamicImage::ImageRgb16(b) => b.into_raw().chunks_exact(3).map(|p| luma16(p[0], p[1], p[2])).collect(),
        DynamicImage::ImageRgba16(b) => b.into_raw().chunks_exact(4).map(|p| luma16(p[0], p[1], p[2])).collect(),
        other => other.to_luma8().into_raw(),
    };
    GrayImage::new(w, h, pixels)
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn luma8(r: u8, g: u8, b: u8) -> u8 {
    super::round_u8(luma(r as f64, g as f64, b as f64))
}

fn luma16(r: u16, g: u16, b: u16) -> u8 {
    super::round_u8(luma(r as f64, g as f64, b as f64) * 255.0 / 65535.0)
}

fn scale16(v: u16) -> u8 {
    // floor((v * 255 + 32767.5) / 65535) in integers
    ((2 * v as u32 * 255 + 65535) / (2 * 65535)) as u8
}

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

pub fn encode_gray_png(img: &GrayImage) -> Vec<u8> {
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, img.pixels().to_vec())
        .expect("gray buffer size");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("png encode to memory");
    out.into_inner()
}

pub fn encode_rgb_png(img: &RgbImage) -> Vec<u8> {
    let raw: Vec<u8> = img.pixels.iter().flatten().copied().collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, raw).expect("rgb buffer size");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("png encode to memory");
    out.into_inner()
}
