//! Score-CAM and GAP-head heatmaps for a small fixture network, written as
//! PNGs into the directory given as the first argument (default: cam_out).
//!
//! cargo run --example score_cam [-- out_dir]

use std::path::PathBuf;

use cxr_core::explain::{compute_cam, model_view, overlay, CamMethod, CamRequest, DEFAULT_SCORE_CAM_BATCH};
use cxr_core::imagecore::{encode_gray_png, encode_rgb_png, inference_preprocess, ClaheParams, GrayImage, NormalizationStats};
use cxr_core::models::{fixture_weights, Architecture, Model};

fn main() {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "cam_out".into()));
    std::fs::create_dir_all(&out).expect("output directory");
    let g = Architecture::TinyCnn.build(4);
    let model = Model::from_store(fixture_weights(&g, 7)).unwrap();

    let img = GrayImage::from_fn(256, 256, |x, y| {
        let (dx, dy) = (x as f64 - 90.0, y as f64 - 140.0);
        (60.0 + 150.0 * (-(dx * dx + dy * dy) / 900.0).exp()) as u8
    });
    let x = inference_preprocess(&img, &ClaheParams::default(), &NormalizationStats::IMAGENET).unwrap();
    let view = model_view(&img).unwrap();

    for method in [CamMethod::GapHead, CamMethod::ScoreCam] {
        let req = CamRequest { method, layer: None, target_class: 0, top_k: None, batch_size: DEFAULT_SCORE_CAM_BATCH };
        let cam = compute_cam(&model.graph, &model.weights, &x, &req).expect("cam");
        let alpha: Vec<String> = cam.weights.alpha.iter().map(|a| format!("{a:.4}")).collect();
        println!("{} at {}: alpha [{}]", method.as_str(), cam.layer, alpha.join(", "));
        std::fs::write(out.join(format!("{}_heatmap.png", method.as_str())), encode_gray_png(&cam.heatmap.to_gray())).unwrap();
        let rgb = overlay(&cam.heatmap, &view, 0.4).unwrap();
        std::fs::write(out.join(format!("{}_overlay.png", method.as_str())), encode_rgb_png(&rgb)).unwrap();
    }
    println!("wrote {}", out.display());
}
