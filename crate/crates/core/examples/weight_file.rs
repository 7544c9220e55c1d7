//! Writes a fixture weight file, reads it back and shows what a single
//! flipped byte does to loading.
//!
//! cargo run --example weight_file

use cxr_core::models::{fixture_weights, Architecture, Model};
use cxr_core::nn::{weight_digest, WeightStore};

fn main() {
    let g = Architecture::TinyCnn.build(4);
    let store = fixture_weights(&g, 3);
    let bytes = store.to_bytes();
    println!("{} tensors, {} values, {} bytes, sha256 {}", store.len(), store.total_elements(), bytes.len(), weight_digest(&bytes));

    let back = WeightStore::from_bytes(&bytes).expect("round trip");
    println!("round trip equal: {}", back == store);
    let model = Model::from_bytes(&bytes).expect("loads");
    println!("architecture {}, labels {:?}", model.weights.architecture, model.graph.class_labels);

    for (what, damaged) in [
        ("truncated", bytes[..bytes.len() - 3].to_vec()),
        ("bad magic", [b"XXXX", &bytes[4..]].concat()),
        ("trailing byte", [&bytes[..], &[0u8]].concat()),
    ] {
        match Model::from_bytes(&damaged) {
            Ok(_) => println!("{what}: loaded"),
            Err(e) => println!("{what}: {e}"),
        }
    }
}
