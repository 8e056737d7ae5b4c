//! Deterministic graph executor.

use std::collections::BTreeMap;

use crate::engine::graph::{Graph, LayerSpec, Node, Source};
use crate::engine::ops;
use crate::engine::param::Param;
use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};
use crate::model_io::WeightStore;

#[derive(Clone, Copy, Debug)]
pub struct ExecConfig {
    /// Intra-operator thread count for conv layers. Results are bit-identical
    /// for every value.
    pub threads: usize,
    /// Reject non-finite intermediate values.
    pub check_finite: bool,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            threads: 1,
            check_finite: true,
        }
    }
}

/// Checks that `weights` has a correctly shaped entry for every
/// parameterized node of `graph`.
pub fn validate_weights(graph: &Graph, weights: &WeightStore) -> Result<()> {
    for node in graph.parameterized_nodes() {
        let (wdims, bdims) = node.spec.param_dims().expect("parameterized");
        let check = |name: String, dims: &[usize]| -> Result<()> {
            match weights.get(&name) {
                None => Err(Error::Weight {
                    node: node.id.clone(),
                    msg: format!("missing entry `{name}`"),
                }),
                Some(p) if p.dims() != dims => Err(Error::Weight {
                    node: node.id.clone(),
                    msg: format!("`{name}` has dims {:?}, expected {:?}", p.dims(), dims),
                }),
                Some(_) => Ok(()),
            }
        };
        check(WeightStore::weight_name(&node.id), &wdims)?;
        if let Some(bdims) = bdims {
            check(WeightStore::bias_name(&node.id), &bdims)?;
        }
    }
    Ok(())
}

pub struct Executor<'a> {
    graph: &'a Graph,
    weights: &'a WeightStore,
    config: ExecConfig,
    sources: Vec<Vec<Source>>,
    last_use: Vec<usize>,
}

impl<'a> Executor<'a> {
    pub fn new(graph: &'a Graph, weights: &'a WeightStore, config: ExecConfig) -> Result<Self> {
        validate_weights(graph, weights)?;
        let sources = graph.sources();
        let mut last_use: Vec<usize> = (0..graph.len()).collect();
        for (i, srcs) in sources.iter().enumerate() {
            for s in srcs {
                if let Source::Node(j) = *s {
                    last_use[j] = i;
                }
            }
        }
        for id in graph.outputs().values() {
            let j = graph.node_index(id).expect("validated output");
            last_use[j] = usize::MAX;
        }
        Ok(Executor {
            graph,
            weights,
            config,
            sources,
            last_use,
        })
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    pub fn run(&self, inputs: BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
        self.run_traced(inputs, |_, _| {})
    }

    /// Like [`run`](Self::run), calling `trace(node_index, output)` after
    /// every node.
    pub fn run_traced(
        &self,
        mut inputs: BTreeMap<String, Tensor>,
        mut trace: impl FnMut(usize, &Tensor),
    ) -> Result<BTreeMap<String, Tensor>> {
        let mut graph_inputs = Vec::with_capacity(self.graph.inputs().len());
        for inp in self.graph.inputs() {
            let t = inputs
                .remove(&inp.name)
                .ok_or_else(|| Error::Graph(format!("missing graph input `{}`", inp.name)))?;
            if t.c() != inp.channels {
                return Err(Error::shape(format!(
                    "input `{}` expects {} channels, got {}",
                    inp.name,
                    inp.channels,
                    t.shape()
                )));
            }
            graph_inputs.push(t);
        }
        if let Some(extra) = inputs.keys().next() {
            return Err(Error::Graph(format!("unknown graph input `{extra}`")));
        }

        let mut values: Vec<Option<Tensor>> = vec![None; self.graph.len()];
        for (i, node) in self.graph.nodes().iter().enumerate() {
            let args: Vec<&Tensor> = self.sources[i]
                .iter()
                .map(|s| match *s {
                    Source::Input(k) => &graph_inputs[k],
                    Source::Node(k) => values[k].as_ref().expect("value freed before last use"),
                })
                .collect();
            let out = self.eval(node, &args)?;
            if self.config.check_finite && !out.all_finite() {
                return Err(Error::NonFinite(node.id.clone()));
            }
            trace(i, &out);
            values[i] = Some(out);
            for s in &self.sources[i] {
                if let Source::Node(k) = *s {
                    if self.last_use[k] == i {
                        values[k] = None;
                    }
                }
            }
        }

        let mut outputs = BTreeMap::new();
        for (role, id) in self.graph.outputs() {
            let k = self.graph.node_index(id).expect("validated output");
            let t = values[k].clone().expect("outputs are retained");
            outputs.insert(role.clone(), t);
        }
        Ok(outputs)
    }

    fn param(&self, node: &Node) -> (&Param, Option<&Param>) {
        let w = self
            .weights
            .get(&WeightStore::weight_name(&node.id))
            .expect("validated weight");
        let b = self.weights.get(&WeightStore::bias_name(&node.id));
        (w, b)
    }

    fn eval(&self, node: &Node, args: &[&Tensor]) -> Result<Tensor> {
        let threads = self.config.threads;
        let x = args[0];
        let r = match node.spec {
            LayerSpec::Conv2d { stride, bias, .. } => {
                let (w, b) = self.param(node);
                ops::conv2d_par(x, w, b.filter(|_| bias), stride, threads)
            }
            LayerSpec::DepthwiseConv2d { stride, bias, .. } => {
                let (w, b) = self.param(node);
                ops::depthwise_conv2d_par(x, w, b.filter(|_| bias), stride, threads)
            }
            LayerSpec::FullyConnected { bias, .. } => {
                let (w, b) = self.param(node);
                ops::fully_connected(x, w, b.filter(|_| bias))
            }
            LayerSpec::MaxPool { kernel, stride } => ops::max_pool(x, kernel, stride),
            LayerSpec::GlobalAvgPool => ops::global_avg_pool(x),
            LayerSpec::UpsampleNearest2x => Ok(ops::upsample_nearest_2x(x)),
            LayerSpec::ChannelShuffle { groups } => ops::channel_shuffle(x, groups),
            LayerSpec::ChannelSplit { split, part } => ops::channel_split(x, split, part),
            LayerSpec::Concat => ops::concat(args),
            LayerSpec::ElementwiseAdd => ops::add(x, args[1]),
            LayerSpec::ElementwiseMul => ops::mul(x, args[1]),
            LayerSpec::BroadcastAdd => ops::broadcast_add(x, args[1]),
            LayerSpec::ReLU => Ok(ops::relu(x)),
            LayerSpec::Sigmoid => Ok(ops::sigmoid(x)),
            LayerSpec::Softmax { axis } => ops::softmax(x, axis),
        };
        r.map_err(|e| Error::node(&node.id, e.to_string()))
    }
}

/// Runs a single-input graph and returns its named outputs.
pub fn run_graph(
    graph: &Graph,
    weights: &WeightStore,
    input: Tensor,
) -> Result<BTreeMap<String, Tensor>> {
    let [inp] = graph.inputs() else {
        return Err(Error::Graph(format!(
            "graph has {} inputs, expected exactly one",
            graph.inputs().len()
        )));
    };
    Executor::new(graph, weights, ExecConfig::default())?
        .run(BTreeMap::from([(inp.name.clone(), input)]))
}
