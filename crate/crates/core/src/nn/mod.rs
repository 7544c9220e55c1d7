//! Forward-only neural network executor.
//!
//! Operators work on NCHW single-precision tensors and accumulate reductions
//! in double precision. A [`ModelGraph`] is a topologically ordered node list
//! interpreted against a [`WeightStore`].

mod graph;
mod ops;
mod tensor;
mod weights;

pub use graph::{graph_execute, Execution, GraphNode, ModelGraph, Op, WeightRef, GRAPH_INPUT};
pub use ops::{
    add, batchnorm, conv2d, gelu, global_avg_pool, layernorm, linear, maxpool, relu, softmax, Conv2dParams,
    BATCHNORM_EPS, LAYERNORM_EPS,
};
pub use tensor::Tensor4;
pub use weights::{load_weights, save_weights, weight_digest, WeightStore, WeightTensor, CXRW_MAGIC, CXRW_VERSION};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error at `{node}`: {msg}")]
    Shape { node: String, msg: String },
    #[error("node `{node}` references missing weight `{name}`")]
    MissingWeight { node: String, name: String },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("weight file format error: {0}")]
    Format(String),
    #[error("weight file integrity error: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NnError {
    pub(crate) fn shape(node: &str, msg: impl Into<String>) -> Self {
        NnError::Shape { node: node.to_string(), msg: msg.into() }
    }
}
