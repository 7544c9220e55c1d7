//! Graph builders for the supported architectures, head replacement and
//! seeded fixture weights.
//!
//! Tensor names follow the torchvision module paths (`layer1.0.conv1.weight`,
//! `features.1.0.block.0.weight`, ...) so exported state dicts map onto CXRW
//! files by name. ConvNeXt's pointwise linears are stored as 1x1 convolutions
//! with shape `(out, in, 1, 1)`.

use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::imagecore::ImageTensor;
use crate::nn::{
    self, GraphNode, ModelGraph, NnError, Op, Tensor4, WeightStore, WeightTensor, BATCHNORM_EPS, GRAPH_INPUT,
    LAYERNORM_EPS,
};
use crate::rng::RngState;

/// Output label order of every 4-class model.
pub const CLASS_LABELS: [&str; 4] = ["normal", "bacteria", "virus", "mycoplasma"];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("head error: {0}")]
    Head(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Resnet18,
    ConvnextTiny,
    /// Three-conv network used for fast fixtures and tests.
    TinyCnn,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::Resnet18, Architecture::ConvnextTiny, Architecture::TinyCnn];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Resnet18 => "resnet18",
            Architecture::ConvnextTiny => "convnext_tiny",
            Architecture::TinyCnn => "tiny_cnn",
        }
    }

    pub fn build(self, num_classes: usize) -> ModelGraph {
        match self {
            Architecture::Resnet18 => build_resnet18(num_classes),
            Architecture::ConvnextTiny => build_convnext_tiny(num_classes),
            Architecture::TinyCnn => build_tiny_cnn(num_classes),
        }
    }
}

impl FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| ModelError::UnknownArchitecture(s.to_string()))
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn labels_for(num_classes: usize) -> Vec<String> {
    if num_classes == CLASS_LABELS.len() {
        CLASS_LABELS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..num_classes).map(|i| format!("class_{i}")).collect()
    }
}

/// Appends nodes and remembers the id of the last one.
struct Builder {
    nodes: Vec<GraphNode>,
    last: String,
}

impl Builder {
    fn new() -> Self {
        Self { nodes: Vec::new(), last: GRAPH_INPUT.to_string() }
    }

    fn push(&mut self, id: &str, op: Op, inputs: &[&str]) -> String {
        self.nodes.push(GraphNode::new(id, op, inputs, id));
        self.last = id.to_string();
        self.last.clone()
    }

    fn then(&mut self, id: &str, op: Op) -> String {
        let prev = self.last.clone();
        self.push(id, op, &[&prev])
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, id: &str, cin: usize, cout: usize, k: usize, s: usize, p: usize, groups: usize, bias: bool) -> String {
        self.then(
            id,
            Op::Conv2d { in_channels: cin, out_channels: cout, kernel: k, stride: s, padding: p, groups, bias },
        )
    }

    fn finish(self, arch: Architecture, num_classes: usize) -> ModelGraph {
        ModelGraph {
            architecture: arch.as_str().to_string(),
            output_node: self.last,
            nodes: self.nodes,
            input_shape: [3, 224, 224],
            class_labels: labels_for(num_classes),
        }
    }
}

fn bn(c: usize) -> Op {
    Op::BatchNorm { channels: c, eps: BATCHNORM_EPS }
}

fn ln(c: usize) -> Op {
    Op::LayerNorm { channels: c, eps: LAYERNORM_EPS }
}

/// ResNet-18: 7x7 stem, four layers of two basic blocks, GAP, linear.
pub fn build_resnet18(num_classes: usize) -> ModelGraph {
    let mut b = Builder::new();
    b.conv("conv1", 3, 64, 7, 2, 3, 1, false);
    b.then("bn1", bn(64));
    b.then("relu", Op::Relu);
    b.then("maxpool", Op::MaxPool { kernel: 3, stride: 2, padding: 1 });
    let mut cin = 64;
    for (li, &width) in [64usize, 128, 256, 512].iter().enumerate() {
        for bi in 0..2 {
            let p = format!("layer{}.{}", li + 1, bi);
            let stride = if li > 0 && bi == 0 { 2 } else { 1 };
            let input = b.last.clone();
            b.conv(&format!("{p}.conv1"), cin, width, 3, stride, 1, 1, false);
            b.then(&format!("{p}.bn1"), bn(width));
            b.then(&format!("{p}.relu1"), Op::Relu);
            b.conv(&format!("{p}.conv2"), width, width, 3, 1, 1, 1, false);
            let main = b.then(&format!("{p}.bn2"), bn(width));
            let skip = if stride != 1 || cin != width {
                let d = format!("{p}.downsample");
                b.push(
                    &format!("{d}.0"),
                    Op::Conv2d {
                        in_channels: cin,
                        out_channels: width,
                        kernel: 1,
                        stride,
                        padding: 0,
                        groups: 1,
                        bias: false,
                    },
                    &[&input],
                );
                b.then(&format!("{d}.1"), bn(width))
            } else {
                input
            };
            b.push(&format!("{p}.add"), Op::Add, &[&main, &skip]);
            b.then(&format!("{p}.relu2"), Op::Relu);
            cin = width;
        }
    }
    b.then("avgpool", Op::GlobalAvgPool);
    b.then("fc", Op::Linear { in_features: 512, out_features: num_classes });
    b.finish(Architecture::Resnet18, num_classes)
}

pub const CONVNEXT_DEPTHS: [usize; 4] = [3, 3, 9, 3];
pub const CONVNEXT_WIDTHS: [usize; 4] = [96, 192, 384, 768];

/// ConvNeXt-Tiny without layer scale. The head applies the final layer norm
/// per spatial site before pooling.
pub fn build_convnext_tiny(num_classes: usize) -> ModelGraph {
    let mut b = Builder::new();
    b.conv("features.0.0", 3, 96, 4, 4, 0, 1, true);
    b.then("features.0.1", ln(96));
    for (si, (&depth, &c)) in CONVNEXT_DEPTHS.iter().zip(&CONVNEXT_WIDTHS).enumerate() {
        if si > 0 {
            let d = format!("features.{}", 2 * si);
            b.then(&format!("{d}.0"), ln(CONVNEXT_WIDTHS[si - 1]));
            b.conv(&format!("{d}.1"), CONVNEXT_WIDTHS[si - 1], c, 2, 2, 0, 1, true);
        }
        for bi in 0..depth {
            let p = format!("features.{}.{}", 2 * si + 1, bi);
            let input = b.last.clone();
            b.conv(&format!("{p}.block.0"), c, c, 7, 1, 3, c, true);
            b.then(&format!("{p}.block.2"), ln(c));
            b.conv(&format!("{p}.block.3"), c, 4 * c, 1, 1, 0, 1, true);
            b.then(&format!("{p}.block.4"), Op::Gelu);
            let main = b.conv(&format!("{p}.block.5"), 4 * c, c, 1, 1, 0, 1, true);
            b.push(&format!("{p}.add"), Op::Add, &[&main, &input]);
        }
    }
    b.then("classifier.0", ln(768));
    b.then("avgpool", Op::GlobalAvgPool);
    b.then("classifier.2", Op::Linear { in_features: 768, out_features: num_classes });
    b.finish(Architecture::ConvnextTiny, num_classes)
}

/// Small fully convolutional network: 224 -> 56 -> 28 -> 14 with 8 channels.
pub fn build_tiny_cnn(num_classes: usize) -> ModelGraph {
    let mut b = Builder::new();
    b.conv("conv1", 3, 8, 4, 4, 0, 1, true);
    b.then("relu1", Op::Relu);
    b.conv("conv2", 8, 8, 3, 2, 1, 1, true);
    b.then("relu2", Op::Relu);
    b.conv("conv3", 8, 8, 3, 2, 1, 1, true);
    b.then("relu3", Op::Relu);
    b.then("avgpool", Op::GlobalAvgPool);
    b.then("fc", Op::Linear { in_features: 8, out_features: num_classes });
    b.finish(Architecture::TinyCnn, num_classes)
}

/// Swaps the final linear layer for one with `num_classes` outputs and
/// relabels the graph. Weight names are unchanged.
pub fn replace_head(g: &ModelGraph, num_classes: usize) -> Result<ModelGraph, ModelError> {
    let last = g.nodes.last().ok_or_else(|| ModelError::Head("graph is empty".into()))?;
    if last.id != g.output_node {
        return Err(ModelError::Head(format!("output `{}` is not the final node", g.output_node)));
    }
    let Op::Linear { in_features, .. } = last.op else {
        return Err(ModelError::Head(format!("graph ends in {}, not linear", last.op.kind())));
    };
    let prefix = last.weight_refs[0].name.trim_end_matches(".weight").to_string();
    let inputs: Vec<&str> = last.inputs.iter().map(String::as_str).collect();
    let head = GraphNode::new(last.id.clone(), Op::Linear { in_features, out_features: num_classes }, &inputs, &prefix);
    let mut out = g.clone();
    *out.nodes.last_mut().expect("non-empty") = head;
    out.class_labels = labels_for(num_classes);
    Ok(out)
}

/// Id of the feature tensor feeding the pooling layer of a GAP -> linear head.
pub fn gap_feature_layer(g: &ModelGraph) -> Result<String, ModelError> {
    let (pool, _) = gap_head(g)?;
    Ok(pool.inputs[0].clone())
}

/// The `(pool, linear)` node pair of a GAP -> linear head.
pub fn gap_head(g: &ModelGraph) -> Result<(&GraphNode, &GraphNode), ModelError> {
    let fc = g.node(&g.output_node).ok_or_else(|| ModelError::Head("missing output node".into()))?;
    if !matches!(fc.op, Op::Linear { .. }) {
        return Err(ModelError::Head(format!("output node is {}, not linear", fc.op.kind())));
    }
    let pool = g.node(&fc.inputs[0]).ok_or_else(|| ModelError::Head("linear input is the graph input".into()))?;
    if !matches!(pool.op, Op::GlobalAvgPool) {
        return Err(ModelError::Head(format!("linear is fed by {}, not global_avg_pool", pool.op.kind())));
    }
    Ok((pool, fc))
}

/// Deterministic random weights for `g`.
///
/// A single generator seeded with `seed` walks the weight references in
/// graph order. Conv kernels draw `N(0, 2 / fan_in)`, linear weights
/// `N(0, 1 / in_features)`, conv and linear biases `N(0, 0.01)`. Norm layers
/// get unit scale, zero shift, zero running mean and unit running variance
/// without consuming draws.
pub fn fixture_weights(g: &ModelGraph, seed: u64) -> WeightStore {
    let mut rng = RngState::new(seed);
    let mut store = WeightStore::new(&g.architecture, g.class_labels.clone());
    for node in &g.nodes {
        for r in &node.weight_refs {
            let n: usize = r.shape.iter().product();
            let suffix = r.name.rsplit('.').next().unwrap_or("");
            let gaussian = |rng: &mut RngState, std: f64| -> Vec<f32> {
                (0..n).map(|_| (rng.next_gaussian() * std) as f32).collect()
            };
            let data = match (&node.op, suffix) {
                (Op::Conv2d { .. }, "weight") => {
                    let fan_in: usize = r.shape[1..].iter().product();
                    gaussian(&mut rng, (2.0 / fan_in as f64).sqrt())
                }
                (Op::Linear { in_features, .. }, "weight") => gaussian(&mut rng, (1.0 / *in_features as f64).sqrt()),
                (Op::Conv2d { .. } | Op::Linear { .. }, "bias") => gaussian(&mut rng, 0.1),
                (_, "weight" | "running_var") => vec![1.0; n],
                _ => vec![0.0; n],
            };
            store.insert(r.name.clone(), WeightTensor { shape: r.shape.clone(), data });
        }
    }
    store
}

/// A graph with the weights it was validated against.
#[derive(Debug, Clone)]
pub struct Model {
    pub graph: ModelGraph,
    pub weights: WeightStore,
    /// Hex SHA-256 of the weight file, empty for in-memory stores.
    pub digest: String,
}

impl Model {
    /// Rebuilds the graph named in the store header and checks every
    /// weight reference.
    pub fn from_store(weights: WeightStore) -> Result<Self, ModelError> {
        let arch: Architecture = weights.architecture.parse()?;
        let n = weights.class_labels.len();
        if n == 0 {
            return Err(ModelError::Head("weight file declares no class labels".into()));
        }
        let mut graph = arch.build(n);
        graph.class_labels = weights.class_labels.clone();
        graph.validate_weights(&weights)?;
        Ok(Self { graph, weights, digest: String::new() })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut m = Self::from_store(WeightStore::from_bytes(bytes)?)?;
        m.digest = nn::weight_digest(bytes);
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(NnError::from)?;
        Self::from_bytes(&bytes)
    }

    /// Softmax probabilities for a single preprocessed image.
    pub fn predict(&self, x: &ImageTensor) -> Result<Vec<f64>, ModelError> {
        let e = self.graph.execute(&self.weights, &Tensor4::from(x), &[])?;
        Ok(nn::softmax(&e.logits(0)))
    }
}
