//! Serves the HTTP API on a fixture model.
//!
//! cargo run --release --example serve [-- port]
//! curl -F image=@chest.png localhost:8080/v1/classify

use cxr_core::imagecore::{ClaheParams, NormalizationStats};
use cxr_core::models::{fixture_weights, Architecture, Model};
use cxr_core::service::{self, AppState, ServiceConfig};

#[tokio::main]
async fn main() -> std::io::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let port = std::env::args().nth(1).and_then(|p| p.parse().ok()).unwrap_or(8080);
    let g = Architecture::TinyCnn.build(4);
    let model = Model::from_store(fixture_weights(&g, 7)).map_err(|e| e.to_string());
    let config = ServiceConfig { host: "127.0.0.1".into(), port, ..ServiceConfig::default() };
    let state = AppState::new(model, config, ClaheParams::default(), NormalizationStats::IMAGENET);
    service::serve(state).await
}
