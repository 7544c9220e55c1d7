//! Stratified 80/10/10 split of a synthetic manifest with fixed class sizes.
//!
//! cargo run --example dataset_split [-- seed]

use cxr_core::cli::render_split;
use cxr_core::evalmetrics::{stratified_split, Manifest};
use cxr_core::models::CLASS_LABELS;

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let sizes = [838, 858, 816, 833];
    let mut jsonl = String::new();
    for (label, n) in CLASS_LABELS.iter().zip(sizes) {
        for i in 0..n {
            jsonl += &format!("{{\"path\": \"{label}/{i:04}.png\", \"label\": \"{label}\"}}\n");
        }
    }
    let m = Manifest::from_jsonl(&jsonl).expect("valid manifest");
    let split = stratified_split(&m, (0.8, 0.1, 0.1), seed).expect("valid ratios");
    print!("{}", render_split(&split.counts()));
    println!("first test entry with seed {seed}: {}", split.test.to_jsonl().lines().next().unwrap_or(""));
}
