//! Runs the six evaluation stages on a synthetic radiograph (or a file given
//! as the first argument) and prints the shape and range after each one.
//!
//! cargo run --example preprocess_pipeline [-- image.png]

use cxr_core::imagecore::{decode_image, inference_stages, ClaheParams, GrayImage, NormalizationStats, PreprocessStages};

fn synthetic(w: usize, h: usize) -> GrayImage {
    GrayImage::from_fn(w, h, |x, y| {
        let dx = x as f64 / w as f64 - 0.5;
        let dy = y as f64 / h as f64 - 0.45;
        let lungs = if (dx.abs() - 0.2).abs() < 0.12 && dy.abs() < 0.3 { 60.0 } else { 0.0 };
        (170.0 - lungs - 80.0 * (dx * dx + dy * dy)).clamp(0.0, 255.0) as u8
    })
}

fn main() {
    let img = match std::env::args().nth(1) {
        Some(path) => decode_image(&std::fs::read(&path).expect("readable file")).expect("decodable image"),
        None => synthetic(512, 640),
    };
    println!("input {}x{}", img.width(), img.height());
    let stages = inference_stages(&img, &ClaheParams::default(), &NormalizationStats::IMAGENET).expect("preprocess");
    for n in 1..=PreprocessStages::COUNT {
        let t = stages.stage(n).unwrap();
        let lo = t.data().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = t.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        println!(
            "{n} {:<20} {}x{}x{}  [{lo:.4}, {hi:.4}]",
            PreprocessStages::stage_name(n),
            t.channels(),
            t.height(),
            t.width()
        );
    }
}
