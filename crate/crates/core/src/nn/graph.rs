use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;

use super::ops::{self, conv_out_len, Conv2dParams};
use super::{NnError, Tensor4, WeightStore};

/// Reserved id naming the graph input in `GraphNode::inputs`.
pub const GRAPH_INPUT: &str = "input";

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
    },
    LayerNorm {
        channels: usize,
        eps: f64,
    },
    Relu,
    Gelu,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
    Add,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::LayerNorm { .. } => "layernorm",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::MaxPool { .. } => "maxpool",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::Softmax => "softmax",
            Op::Add => "add",
        }
    }

    fn arity(&self) -> usize {
        if matches!(self, Op::Add) {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightRef {
    pub name: String,
    pub shape: Vec<usize>,
    /// Running statistics are stored but are not trainable parameters.
    pub learnable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
    pub weight_refs: Vec<WeightRef>,
}

impl GraphNode {
    /// Builds a node whose weight names are derived from `prefix` in the
    /// conventional order for its operator.
    pub fn new(id: impl Into<String>, op: Op, inputs: &[&str], prefix: &str) -> Self {
        let w = |suffix: &str, shape: Vec<usize>, learnable: bool| WeightRef {
            name: format!("{prefix}.{suffix}"),
            shape,
            learnable,
        };
        let weight_refs = match &op {
            Op::Conv2d { in_channels, out_channels, kernel, groups, bias, .. } => {
                let mut v = vec![w("weight", vec![*out_channels, in_channels / groups, *kernel, *kernel], true)];
                if *bias {
                    v.push(w("bias", vec![*out_channels], true));
                }
                v
            }
            Op::BatchNorm { channels, .. } => vec![
                w("weight", vec![*channels], true),
                w("bias", vec![*channels], true),
                w("running_mean", vec![*channels], false),
                w("running_var", vec![*channels], false),
            ],
            Op::LayerNorm { channels, .. } => {
                vec![w("weight", vec![*channels], true), w("bias", vec![*channels], true)]
            }
            Op::Linear { in_features, out_features } => vec![
                w("weight", vec![*out_features, *in_features], true),
                w("bias", vec![*out_features], true),
            ],
            _ => Vec::new(),
        };
        GraphNode { id: id.into(), op, inputs: inputs.iter().map(|s| s.to_string()).collect(), weight_refs }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub architecture: String,
    pub nodes: Vec<GraphNode>,
    /// Per-sample `(channels, height, width)`.
    pub input_shape: [usize; 3],
    pub output_node: String,
    pub class_labels: Vec<String>,
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct Execution {
    pub output: Tensor4,
    pub activations: IndexMap<String, Tensor4>,
}

impl Execution {
    /// Output row `n` widened to `f64`.
    pub fn logits(&self, n: usize) -> Vec<f64> {
        let per = self.output.len() / self.output.batch().max(1);
        self.output.data()[n * per..(n + 1) * per].iter().map(|&v| v as f64).collect()
    }
}

pub fn graph_execute(
    g: &ModelGraph,
    w: &WeightStore,
    x: &Tensor4,
    capture: &[&str],
) -> Result<Execution, NnError> {
    g.execute(w, x, capture)
}

impl ModelGraph {
    pub fn node(&self, id: &str) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    /// Checks ids, topological order, arity and the output node.
    pub fn validate(&self) -> Result<(), NnError> {
        let mut seen: HashSet<&str> = HashSet::new();
        for node in &self.nodes {
            if node.id == GRAPH_INPUT || !seen.insert(&node.id) {
                return Err(NnError::InvalidGraph(format!("duplicate or reserved node id `{}`", node.id)));
            }
            if node.inputs.len() != node.op.arity() {
                return Err(NnError::InvalidGraph(format!(
                    "node `{}` ({}) takes {} inputs, has {}",
                    node.id,
                    node.op.kind(),
                    node.op.arity(),
                    node.inputs.len()
                )));
            }
            for inp in &node.inputs {
                if inp != GRAPH_INPUT && (!seen.contains(inp.as_str()) || inp == &node.id) {
                    return Err(NnError::InvalidGraph(format!(
                        "node `{}` reads `{}` which is not an earlier node",
                        node.id, inp
                    )));
                }
            }
        }
        if !seen.contains(self.output_node.as_str()) {
            return Err(NnError::UnknownNode(self.output_node.clone()));
        }
        Ok(())
    }

    /// Per-sample output shape of every node for the declared input shape.
    pub fn infer_shapes(&self) -> Result<IndexMap<String, [usize; 3]>, NnError> {
        self.validate()?;
        let mut shapes: IndexMap<String, [usize; 3]> = IndexMap::new();
        for node in &self.nodes {
            let get = |id: &String| -> [usize; 3] {
                if id == GRAPH_INPUT {
                    self.input_shape
                } else {
                    shapes[id.as_str()]
                }
            };
            let [c, h, w] = get(&node.inputs[0]);
            let bad = |msg: String| NnError::shape(&node.id, msg);
            let out = match &node.op {
                Op::Conv2d { in_channels, out_channels, kernel, stride, padding, groups, .. } => {
                    if c != *in_channels {
                        return Err(bad(format!("expects {in_channels} channels, got {c}")));
                    }
                    if *groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
                        return Err(bad(format!("groups {groups} do not divide channels")));
                    }
                    match (conv_out_len(h, *kernel, *stride, *padding), conv_out_len(w, *kernel, *stride, *padding)) {
                        (Some(oh), Some(ow)) => [*out_channels, oh, ow],
                        _ => return Err(bad(format!("kernel {kernel} larger than padded {h}x{w}"))),
                    }
                }
                Op::BatchNorm { channels, .. } | Op::LayerNorm { channels, .. } => {
                    if c != *channels {
                        return Err(bad(format!("expects {channels} channels, got {c}")));
                    }
                    [c, h, w]
                }
                Op::Relu | Op::Gelu => [c, h, w],
                Op::MaxPool { kernel, stride, padding } => {
                    match (conv_out_len(h, *kernel, *stride, *padding), conv_out_len(w, *kernel, *stride, *padding)) {
                        (Some(oh), Some(ow)) => [c, oh, ow],
                        _ => return Err(bad(format!("pool window {kernel} larger than padded {h}x{w}"))),
                    }
                }
                Op::GlobalAvgPool => [c, 1, 1],
                Op::Linear { in_features, out_features } => {
                    if c * h * w != *in_features {
                        return Err(bad(format!("expects {in_features} features, got {}", c * h * w)));
                    }
                    [*out_features, 1, 1]
                }
                Op::Softmax => {
                    if h * w != 1 {
                        return Err(bad("softmax expects a flat vector".into()));
                    }
                    [c, h, w]
                }
                Op::Add => {
                    let other = get(&node.inputs[1]);
                    if other != [c, h, w] {
                        return Err(bad(format!("add of {:?} and {:?}", [c, h, w], other)));
                    }
                    [c, h, w]
                }
            };
            shapes.insert(node.id.clone(), out);
        }
        Ok(shapes)
    }

    /// Every weight reference resolves with the declared shape.
    pub fn validate_weights(&self, w: &WeightStore) -> Result<(), NnError> {
        for node in &self.nodes {
            for r in &node.weight_refs {
                let t = w
                    .get(&r.name)
                    .ok_or_else(|| NnError::MissingWeight { node: node.id.clone(), name: r.name.clone() })?;
                if t.shape != r.shape {
                    return Err(NnError::shape(
                        &node.id,
                        format!("weight `{}` has shape {:?}, expected {:?}", r.name, t.shape, r.shape),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Trainable parameter count (batchnorm running statistics excluded).
    pub fn count_params(&self) -> u64 {
        self.nodes
            .iter()
            .flat_map(|n| &n.weight_refs)
            .filter(|r| r.learnable)
            .map(|r| r.shape.iter().product::<usize>() as u64)
            .sum()
    }

    /// Forward cost for one sample at the declared input shape, counting a
    /// multiply-accumulate as one operation.
    pub fn count_flops(&self) -> Result<u64, NnError> {
        let shapes = self.infer_shapes()?;
        let mut total = 0u64;
        for node in &self.nodes {
            let [c, h, w] = shapes[node.id.as_str()];
            let out_elems = (c * h * w) as u64;
            total += match &node.op {
                Op::Conv2d { in_channels, kernel, groups, .. } => {
                    out_elems * (in_channels / groups) as u64 * (kernel * kernel) as u64
                }
                Op::Linear { in_features, out_features } => (in_features * out_features) as u64,
                _ => out_elems,
            };
        }
        Ok(total)
    }

    pub fn execute(&self, w: &WeightStore, x: &Tensor4, capture: &[&str]) -> Result<Execution, NnError> {
        let [_, c, h, wd] = x.dims();
        if [c, h, wd] != self.input_shape {
            return Err(NnError::shape(
                GRAPH_INPUT,
                format!("input {:?} does not match graph input {:?}", [c, h, wd], self.input_shape),
            ));
        }
        self.run(w, 0, GRAPH_INPUT, x.clone(), capture)
    }

    /// Runs every node after `start` with `value` standing in for the output
    /// of `start`. Nodes downstream may not read anything computed before it.
    pub fn execute_from(
        &self,
        w: &WeightStore,
        start: &str,
        value: Tensor4,
        capture: &[&str],
    ) -> Result<Execution, NnError> {
        let idx = self.node_index(start).ok_or_else(|| NnError::UnknownNode(start.to_string()))?;
        self.run(w, idx + 1, start, value, capture)
    }

    fn run(
        &self,
        w: &WeightStore,
        first: usize,
        seed_id: &str,
        seed: Tensor4,
        capture: &[&str],
    ) -> Result<Execution, NnError> {
        self.validate()?;
        for id in capture {
            if *id != GRAPH_INPUT && self.node(id).is_none() {
                return Err(NnError::UnknownNode(id.to_string()));
            }
        }
        let out_idx = self.node_index(&self.output_node).expect("validated");
        if out_idx < first && self.output_node != seed_id {
            return Err(NnError::InvalidGraph(format!("output `{}` precedes `{seed_id}`", self.output_node)));
        }

        let mut last_use: HashMap<&str, usize> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate().skip(first) {
            for inp in &node.inputs {
                last_use.insert(inp.as_str(), i);
            }
        }
        let keep = |id: &str| id == self.output_node;

        let mut activations = IndexMap::new();
        let mut values: HashMap<&str, Tensor4> = HashMap::new();
        if capture.contains(&seed_id) {
            activations.insert(seed_id.to_string(), seed.clone());
        }
        values.insert(seed_id, seed);

        for (i, node) in self.nodes.iter().enumerate().skip(first) {
            let mut args = Vec::with_capacity(2);
            for inp in &node.inputs {
                let t = values.get(inp.as_str()).ok_or_else(|| {
                    NnError::InvalidGraph(format!("node `{}` needs `{}`, which is not available", node.id, inp))
                })?;
                args.push(t);
            }
            let out = self.apply(node, w, &args)?;
            debug_assert!(out.all_finite(), "non-finite output at node `{}`", node.id);
            if capture.contains(&node.id.as_str()) {
                activations.insert(node.id.clone(), out.clone());
            }
            for inp in &node.inputs {
                if last_use.get(inp.as_str()) == Some(&i) && !keep(inp) {
                    values.remove(inp.as_str());
                }
            }
            values.insert(&node.id, out);
            if i == out_idx {
                break;
            }
        }
        let output = values
            .remove(self.output_node.as_str())
            .ok_or_else(|| NnError::InvalidGraph("output node was not produced".into()))?;
        Ok(Execution { output, activations })
    }

    fn apply(&self, node: &GraphNode, w: &WeightStore, args: &[&Tensor4]) -> Result<Tensor4, NnError> {
        let weight = |k: usize| -> Result<&[f32], NnError> {
            let r = &node.weight_refs[k];
            let t = w
                .get(&r.name)
                .ok_or_else(|| NnError::MissingWeight { node: node.id.clone(), name: r.name.clone() })?;
            if t.shape != r.shape {
                return Err(NnError::shape(&node.id, format!("weight `{}` has shape {:?}", r.name, t.shape)));
            }
            Ok(&t.data)
        };
        let x = args[0];
        let tag = |e: NnError| match e {
            NnError::Shape { msg, .. } => NnError::Shape { node: node.id.clone(), msg },
            other => other,
        };
        let out = match &node.op {
            Op::Conv2d { in_channels, out_channels, kernel, stride, padding, groups, bias } => {
                let wdims = [*out_channels, in_channels / groups, *kernel, *kernel];
                let b = if *bias { Some(weight(1)?) } else { None };
                ops::conv2d_raw(
                    x,
                    wdims,
                    weight(0)?,
                    b,
                    Conv2dParams { stride: *stride, padding: *padding, groups: *groups },
                )
            }
            Op::BatchNorm { eps, .. } => ops::batchnorm(x, weight(0)?, weight(1)?, weight(2)?, weight(3)?, *eps),
            Op::LayerNorm { eps, .. } => ops::layernorm(x, weight(0)?, weight(1)?, *eps),
            Op::Relu => Ok(ops::relu(x)),
            Op::Gelu => Ok(ops::gelu(x)),
            Op::MaxPool { kernel, stride, padding } => ops::maxpool(x, *kernel, *stride, *padding),
            Op::GlobalAvgPool => Ok(ops::global_avg_pool(x)),
            Op::Linear { out_features, .. } => ops::linear(x, weight(0)?, Some(weight(1)?), *out_features),
            Op::Softmax => {
                let per = x.len() / x.batch().max(1);
                let mut data = Vec::with_capacity(x.len());
                for row in x.data().chunks(per.max(1)) {
                    let z: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                    data.extend(ops::softmax(&z).into_iter().map(|p| p as f32));
                }
                Tensor4::new(x.dims(), data)
            }
            Op::Add => ops::add(x, args[1]),
        };
        out.map_err(tag)
    }
}
