//! Parameter and FLOP accounting for the built-in architectures, plus one
//! timed forward pass on seeded fixture weights.
//!
//! cargo run --release --example model_accounting [-- --no-forward]

use std::time::Instant;

use cxr_core::models::{fixture_weights, replace_head, Architecture};
use cxr_core::nn::Tensor4;

fn main() {
    let forward = !std::env::args().any(|a| a == "--no-forward");
    println!("{:<14} {:>14} {:>14} {:>10}", "architecture", "params(1000)", "params(4)", "GFLOPs");
    for arch in Architecture::ALL {
        let g = arch.build(1000);
        let head4 = replace_head(&g, 4).expect("linear head");
        let flops = g.count_flops().expect("valid graph");
        println!(
            "{:<14} {:>14} {:>14} {:>10.3}",
            arch.as_str(),
            g.count_params(),
            head4.count_params(),
            flops as f64 / 1e9
        );
        if forward {
            let w = fixture_weights(&head4, 1);
            let x = Tensor4::from_fn([1, 3, 224, 224], |[_, c, y, x]| ((x + 2 * y + c) % 17) as f32 / 8.0 - 1.0);
            let t = Instant::now();
            let e = head4.execute(&w, &x, &[]).expect("forward");
            println!("    forward {:?}, logits {:?}", t.elapsed(), e.logits(0));
        }
    }
}
