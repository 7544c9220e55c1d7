//! Seeded training augmentation: the same seed replays the same crop,
//! perspective and rotation draws.
//!
//! cargo run --example augment_pipeline

use cxr_core::augment::{sample_crop_rect, sample_perspective_corners, sample_rotation, train_transform_batch, AugmentConfig};
use cxr_core::imagecore::{ClaheParams, GrayImage, NormalizationStats};
use cxr_core::rng::{derive_seed, RngState};

fn main() {
    let cfg = AugmentConfig::default();
    let (h, w) = (256, 320);
    for i in 0..4 {
        let mut rng = RngState::new(derive_seed(2024, i));
        let rect = sample_crop_rect(h, w, &cfg, &mut rng);
        let quad = sample_perspective_corners(h, w, &cfg, &mut rng);
        let angle = sample_rotation(&cfg, &mut rng);
        println!(
            "image {i}: crop {}x{} at ({}, {}), perspective {}, rotation {angle:+.2} deg, {} draws",
            rect.width,
            rect.height,
            rect.left,
            rect.top,
            if quad.is_some() { "on" } else { "off" },
            rng.position
        );
    }

    let images: Vec<GrayImage> = (0..4).map(|i| GrayImage::from_fn(w, h, |x, y| ((x * 3 + y * (i + 1)) % 256) as u8)).collect();
    let p = ClaheParams::default();
    let s = NormalizationStats::IMAGENET;
    let a = train_transform_batch(&images, &p, &s, &cfg, 2024).expect("augment");
    let b = train_transform_batch(&images, &p, &s, &cfg, 2024).expect("augment");
    println!("batch of {} tensors {}x{}x{}, replay identical: {}", a.len(), a[0].channels(), a[0].height(), a[0].width(), a == b);
}
