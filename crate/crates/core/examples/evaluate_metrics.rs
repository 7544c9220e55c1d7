//! Macro metrics for a handful of hand-written probability rows.
//!
//! cargo run --example evaluate_metrics

use cxr_core::cli::render_report;
use cxr_core::evalmetrics::macro_metrics;

fn main() {
    let probs = [
        [0.70, 0.10, 0.10, 0.10],
        [0.40, 0.30, 0.20, 0.10],
        [0.10, 0.60, 0.20, 0.10],
        [0.20, 0.20, 0.50, 0.10],
        [0.10, 0.50, 0.30, 0.10],
        [0.05, 0.05, 0.80, 0.10],
        [0.10, 0.10, 0.10, 0.70],
        [0.20, 0.10, 0.30, 0.40],
    ];
    let labels = [0, 1, 1, 2, 2, 2, 3, 0];
    let report = macro_metrics(&probs, &labels).expect("consistent inputs");
    print!("{}", render_report("example", &report));
    println!("confusion matrix (rows are labels):");
    for row in report.confusion_matrix.counts {
        println!("  {row:?}");
    }
}
