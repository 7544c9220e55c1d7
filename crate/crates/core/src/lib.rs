pub mod imagecore;
pub mod rng;
pub mod nn;
pub mod models;
pub mod augment;
pub mod explain;
pub mod evalmetrics;
pub mod service;
pub mod cli;
