//! Builds ResNet-18 with a 4-class head on seeded fixture weights and
//! classifies one synthetic image.
//!
//! cargo run --release --example resnet18_forward

use cxr_core::imagecore::{inference_preprocess, ClaheParams, GrayImage, NormalizationStats};
use cxr_core::models::{fixture_weights, Architecture, Model};
use cxr_core::nn::WeightStore;

fn main() {
    let g = Architecture::Resnet18.build(4);
    let store: WeightStore = fixture_weights(&g, 11);
    let model = Model::from_store(store).expect("fixture weights match the graph");
    println!("{} params, feature layer {:?}", model.graph.count_params(), cxr_core::models::gap_feature_layer(&model.graph).unwrap());

    let img = GrayImage::from_fn(300, 360, |x, y| ((x as f64 * 0.05).sin() * 60.0 + 120.0 + y as f64 * 0.1) as u8);
    let x = inference_preprocess(&img, &ClaheParams::default(), &NormalizationStats::IMAGENET).expect("preprocess");
    let probs = model.predict(&x).expect("forward");
    for (label, p) in model.graph.class_labels.iter().zip(&probs) {
        println!("{label:<12} {p:.6}");
    }
}
