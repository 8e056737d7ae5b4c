//! Declarative network description shared by the executor and the cost
//! analyzer.
//!
//! A [`Graph`] is an ordered list of [`Node`]s. Each node names its inputs by
//! id; an id is either a graph input or an earlier node, so the node list is
//! always a valid topological order. Channel counts are checked when a node is
//! added, spatial sizes when shapes are inferred for a concrete input.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::engine::tensor::Shape;
use crate::error::{Error, Result};

/// Which side of a [`LayerSpec::ChannelSplit`] a node keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    /// Channels `[0, split)`.
    Lower,
    /// Channels `[split, c)`.
    Upper,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    },
    DepthwiseConv2d {
        channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    },
    /// Flattens `(c, h, w)` per batch item and emits `(n, out_features, 1, 1)`.
    FullyConnected {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    UpsampleNearest2x,
    ChannelShuffle {
        groups: usize,
    },
    ChannelSplit {
        split: usize,
        part: SplitPart,
    },
    /// Concatenation along the channel axis.
    Concat,
    ElementwiseAdd,
    ElementwiseMul,
    /// `x + v` where `v` has shape `(n, c, 1, 1)` and is replicated over all sites of `x`.
    BroadcastAdd,
    ReLU,
    Sigmoid,
    Softmax {
        axis: usize,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            bias: true,
        }
    }

    pub fn dwconv(channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::DepthwiseConv2d {
            channels,
            kernel,
            stride,
            bias: true,
        }
    }

    pub fn fc(in_features: usize, out_features: usize) -> Self {
        LayerSpec::FullyConnected {
            in_features,
            out_features,
            bias: true,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "Conv2d",
            LayerSpec::DepthwiseConv2d { .. } => "DepthwiseConv2d",
            LayerSpec::FullyConnected { .. } => "FullyConnected",
            LayerSpec::MaxPool { .. } => "MaxPool",
            LayerSpec::GlobalAvgPool => "GlobalAvgPool",
            LayerSpec::UpsampleNearest2x => "UpsampleNearest2x",
            LayerSpec::ChannelShuffle { .. } => "ChannelShuffle",
            LayerSpec::ChannelSplit { .. } => "ChannelSplit",
            LayerSpec::Concat => "Concat",
            LayerSpec::ElementwiseAdd => "ElementwiseAdd",
            LayerSpec::ElementwiseMul => "ElementwiseMul",
            LayerSpec::BroadcastAdd => "BroadcastAdd",
            LayerSpec::ReLU => "ReLU",
            LayerSpec::Sigmoid => "Sigmoid",
            LayerSpec::Softmax { .. } => "Softmax",
        }
    }

    /// `(kernel, stride)` of sliding-window layers.
    pub fn window(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv2d { kernel, stride, .. }
            | LayerSpec::DepthwiseConv2d { kernel, stride, .. }
            | LayerSpec::MaxPool { kernel, stride } => Some((kernel, stride)),
            _ => None,
        }
    }

    /// Weight dims and optional bias dims for parameterized layers.
    pub fn param_dims(&self) -> Option<(Vec<usize>, Option<Vec<usize>>)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                bias.then(|| vec![out_channels]),
            )),
            LayerSpec::DepthwiseConv2d {
                channels,
                kernel,
                bias,
                ..
            } => Some((
                vec![channels, 1, kernel, kernel],
                bias.then(|| vec![channels]),
            )),
            LayerSpec::FullyConnected {
                in_features,
                out_features,
                bias,
            } => Some((
                vec![out_features, in_features],
                bias.then(|| vec![out_features]),
            )),
            _ => None,
        }
    }

    pub fn is_parameterized(&self) -> bool {
        self.param_dims().is_some()
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            LayerSpec::Concat => n >= 2,
            LayerSpec::ElementwiseAdd | LayerSpec::ElementwiseMul | LayerSpec::BroadcastAdd => {
                n == 2
            }
            _ => n == 1,
        }
    }

    /// Checks attribute-level invariants independent of inputs.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let check_window = |kernel: usize, stride: usize| {
            if kernel == 0 || kernel % 2 == 0 {
                return Err(format!("kernel size {kernel} must be odd"));
            }
            if stride == 0 {
                return Err("stride must be positive".to_string());
            }
            Ok(())
        };
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 {
                    return Err("conv channel counts must be positive".into());
                }
                check_window(kernel, stride)
            }
            LayerSpec::DepthwiseConv2d {
                channels,
                kernel,
                stride,
                ..
            } => {
                if channels == 0 {
                    return Err("depthwise channel count must be positive".into());
                }
                check_window(kernel, stride)
            }
            LayerSpec::MaxPool { kernel, stride } => check_window(kernel, stride),
            LayerSpec::FullyConnected {
                in_features,
                out_features,
                ..
            } => {
                if in_features == 0 || out_features == 0 {
                    return Err("fc feature counts must be positive".into());
                }
                Ok(())
            }
            LayerSpec::ChannelShuffle { groups } if groups == 0 => {
                Err("shuffle groups must be positive".into())
            }
            LayerSpec::Softmax { axis } if !(1..=3).contains(&axis) => {
                Err(format!("softmax axis {axis} must be 1, 2 or 3"))
            }
            _ => Ok(()),
        }
    }

    /// Output channel count given input channel counts.
    pub fn output_channels(&self, inputs: &[usize]) -> std::result::Result<usize, String> {
        if !self.arity_ok(inputs.len()) {
            return Err(format!(
                "{} does not accept {} inputs",
                self.kind_name(),
                inputs.len()
            ));
        }
        let c = inputs[0];
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                ..
            } => {
                if c != in_channels {
                    return Err(format!("conv expects {in_channels} input channels, got {c}"));
                }
                Ok(out_channels)
            }
            LayerSpec::DepthwiseConv2d { channels, .. } => {
                if c != channels {
                    return Err(format!(
                        "depthwise conv expects {channels} input channels, got {c}"
                    ));
                }
                Ok(channels)
            }
            // Feature count also depends on spatial size; checked in `output_shape`.
            LayerSpec::FullyConnected { out_features, .. } => Ok(out_features),
            LayerSpec::ChannelShuffle { groups } => {
                if c % groups != 0 {
                    return Err(format!("{c} channels not divisible into {groups} groups"));
                }
                Ok(c)
            }
            LayerSpec::ChannelSplit { split, part } => {
                if split == 0 || split >= c {
                    return Err(format!("split point {split} outside (0, {c})"));
                }
                Ok(match part {
                    SplitPart::Lower => split,
                    SplitPart::Upper => c - split,
                })
            }
            LayerSpec::Concat => Ok(inputs.iter().sum()),
            LayerSpec::ElementwiseAdd | LayerSpec::ElementwiseMul | LayerSpec::BroadcastAdd => {
                if inputs[1] != c {
                    return Err(format!(
                        "{} channel mismatch: {} vs {}",
                        self.kind_name(),
                        c,
                        inputs[1]
                    ));
                }
                Ok(c)
            }
            _ => Ok(c),
        }
    }

    /// Full output shape given input shapes.
    pub fn output_shape(&self, inputs: &[Shape]) -> std::result::Result<Shape, String> {
        let chans: Vec<usize> = inputs.iter().map(|s| s.c).collect();
        let c = self.output_channels(&chans)?;
        let x = inputs[0];
        let same_size = |other: &Shape| {
            if other.n != x.n || other.h != x.h || other.w != x.w {
                Err(format!(
                    "{} operand shapes differ: {} vs {}",
                    self.kind_name(),
                    x,
                    other
                ))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Conv2d { stride, .. }
            | LayerSpec::DepthwiseConv2d { stride, .. }
            | LayerSpec::MaxPool { stride, .. } => {
                if x.h == 0 || x.w == 0 {
                    return Err("empty spatial extent".into());
                }
                Ok(Shape::new(x.n, c, x.h.div_ceil(stride), x.w.div_ceil(stride)))
            }
            LayerSpec::FullyConnected { in_features, .. } => {
                let flat = x.c * x.h * x.w;
                if flat != in_features {
                    return Err(format!(
                        "fc expects {in_features} input features, got {flat} from {x}"
                    ));
                }
                Ok(Shape::new(x.n, c, 1, 1))
            }
            LayerSpec::GlobalAvgPool => {
                if x.h == 0 || x.w == 0 {
                    return Err("global average pool over empty spatial extent".into());
                }
                Ok(Shape::new(x.n, c, 1, 1))
            }
            LayerSpec::UpsampleNearest2x => Ok(Shape::new(x.n, c, 2 * x.h, 2 * x.w)),
            LayerSpec::Concat => {
                inputs[1..].iter().try_for_each(same_size)?;
                Ok(Shape::new(x.n, c, x.h, x.w))
            }
            LayerSpec::ElementwiseAdd | LayerSpec::ElementwiseMul => {
                same_size(&inputs[1])?;
                Ok(x)
            }
            LayerSpec::BroadcastAdd => {
                let v = inputs[1];
                if v.n != x.n || v.h != 1 || v.w != 1 {
                    return Err(format!("broadcast operand must be ({}, {}, 1, 1), got {}", x.n, x.c, v));
                }
                Ok(x)
            }
            _ => Ok(Shape::new(x.n, c, x.h, x.w)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphInput {
    pub name: String,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub spec: LayerSpec,
    pub inputs: Vec<String>,
}

/// Where a node reads one of its operands from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Input(usize),
    Node(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct Graph {
    inputs: Vec<GraphInput>,
    nodes: Vec<Node>,
    outputs: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct RawGraph {
    inputs: Vec<GraphInput>,
    nodes: Vec<Node>,
    outputs: BTreeMap<String, String>,
}

impl TryFrom<RawGraph> for Graph {
    type Error = Error;

    fn try_from(raw: RawGraph) -> Result<Self> {
        Graph::from_parts(raw.inputs, raw.nodes, raw.outputs)
    }
}

impl From<Graph> for RawGraph {
    fn from(g: Graph) -> Self {
        RawGraph {
            inputs: g.inputs,
            nodes: g.nodes,
            outputs: g.outputs,
        }
    }
}

impl Graph {
    /// Assembles a graph, replaying every node through a [`GraphBuilder`] so
    /// all structural invariants are re-checked.
    pub fn from_parts(
        inputs: Vec<GraphInput>,
        nodes: Vec<Node>,
        outputs: BTreeMap<String, String>,
    ) -> Result<Self> {
        let mut b = GraphBuilder::new();
        for i in &inputs {
            b.input(&i.name, i.channels)?;
        }
        for n in nodes {
            let refs: Vec<&str> = n.inputs.iter().map(String::as_str).collect();
            b.add(&n.id, n.spec, &refs)?;
        }
        for (role, id) in outputs {
            b.output(&role, &id)?;
        }
        Ok(b.finish())
    }

    pub fn inputs(&self) -> &[GraphInput] {
        &self.inputs
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn outputs(&self) -> &BTreeMap<String, String> {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Node index of a named output.
    pub fn output_index(&self, role: &str) -> Option<usize> {
        self.outputs.get(role).and_then(|id| self.node_index(id))
    }

    pub fn parameterized_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.spec.is_parameterized())
    }

    /// Resolved operand sources for every node, in node order.
    pub fn sources(&self) -> Vec<Vec<Source>> {
        let mut lookup: HashMap<&str, Source> = HashMap::new();
        for (i, inp) in self.inputs.iter().enumerate() {
            lookup.insert(inp.name.as_str(), Source::Input(i));
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            out.push(node.inputs.iter().map(|id| lookup[id.as_str()]).collect());
            lookup.insert(node.id.as_str(), Source::Node(i));
        }
        out
    }

    /// Infers every node's output shape for the given graph-input shapes.
    pub fn infer_shapes(&self, input_shapes: &BTreeMap<String, Shape>) -> Result<Vec<Shape>> {
        let mut in_shapes = Vec::with_capacity(self.inputs.len());
        for inp in &self.inputs {
            let s = *input_shapes
                .get(&inp.name)
                .ok_or_else(|| Error::Graph(format!("no shape given for input `{}`", inp.name)))?;
            if s.c != inp.channels {
                return Err(Error::shape(format!(
                    "input `{}` expects {} channels, got {}",
                    inp.name, inp.channels, s
                )));
            }
            in_shapes.push(s);
        }
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for (node, srcs) in self.nodes.iter().zip(self.sources()) {
            let ins: Vec<Shape> = srcs
                .iter()
                .map(|s| match *s {
                    Source::Input(i) => in_shapes[i],
                    Source::Node(i) => shapes[i],
                })
                .collect();
            let s = node
                .spec
                .output_shape(&ins)
                .map_err(|m| Error::node(&node.id, m))?;
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Convenience for single-input graphs.
    pub fn infer_shapes_single(&self, input: Shape) -> Result<Vec<Shape>> {
        let [inp] = self.inputs.as_slice() else {
            return Err(Error::Graph(format!(
                "graph has {} inputs, expected exactly one",
                self.inputs.len()
            )));
        };
        self.infer_shapes(&BTreeMap::from([(inp.name.clone(), input)]))
    }
}

/// Incrementally builds a [`Graph`], checking ids, ordering and channel
/// compatibility as nodes are added.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    inputs: Vec<GraphInput>,
    nodes: Vec<Node>,
    outputs: BTreeMap<String, String>,
    channels: HashMap<String, usize>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, name: &str, channels: usize) -> Result<String> {
        self.claim(name, channels)?;
        self.inputs.push(GraphInput {
            name: name.to_string(),
            channels,
        });
        Ok(name.to_string())
    }

    pub fn add(&mut self, id: &str, spec: LayerSpec, inputs: &[&str]) -> Result<String> {
        spec.validate().map_err(|m| Error::node(id, m))?;
        let mut chans = Vec::with_capacity(inputs.len());
        for &src in inputs {
            let c = self.channels.get(src).copied().ok_or_else(|| {
                Error::node(id, format!("input `{src}` is not defined before this node"))
            })?;
            chans.push(c);
        }
        let c = spec.output_channels(&chans).map_err(|m| Error::node(id, m))?;
        self.claim(id, c)?;
        self.nodes.push(Node {
            id: id.to_string(),
            spec,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        });
        Ok(id.to_string())
    }

    pub fn output(&mut self, role: &str, id: &str) -> Result<()> {
        if !self.nodes.iter().any(|n| n.id == id) {
            return Err(Error::Graph(format!(
                "output `{role}` refers to unknown node `{id}`"
            )));
        }
        self.outputs.insert(role.to_string(), id.to_string());
        Ok(())
    }

    /// Channel count of a previously defined input or node.
    pub fn channels(&self, id: &str) -> Option<usize> {
        self.channels.get(id).copied()
    }

    pub fn finish(self) -> Graph {
        Graph {
            inputs: self.inputs,
            nodes: self.nodes,
            outputs: self.outputs,
        }
    }

    fn claim(&mut self, id: &str, channels: usize) -> Result<()> {
        if id.is_empty() {
            return Err(Error::Graph("empty node id".into()));
        }
        if self.channels.insert(id.to_string(), channels).is_some() {
            return Err(Error::Graph(format!("duplicate id `{id}`")));
        }
        Ok(())
    }
}
