//! Weight storage, deterministic initialization, and architecture export.

mod arch;
mod tnrt;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::{Graph, LayerSpec, Param};

pub use arch::{export_arch, export_arch_string, import_arch, import_arch_str, ArchDoc};
pub use tnrt::{load_weights, read_weights, save_weights, write_weights, MAGIC, VERSION};

/// Named parameters keyed by `<node id>.weight` / `<node id>.bias`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, Param>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn weight_name(node_id: &str) -> String {
        format!("{node_id}.weight")
    }

    pub fn bias_name(node_id: &str) -> String {
        format!("{node_id}.bias")
    }

    /// All-zero parameters for every parameterized node of `graph`.
    pub fn zeros_for(graph: &Graph) -> Self {
        let mut ws = WeightStore::new();
        for node in graph.parameterized_nodes() {
            let (wd, bd) = node.spec.param_dims().expect("parameterized");
            ws.insert(Self::weight_name(&node.id), Param::zeros(wd));
            if let Some(bd) = bd {
                ws.insert(Self::bias_name(&node.id), Param::zeros(bd));
            }
        }
        ws
    }

    pub fn insert(&mut self, name: impl Into<String>, p: Param) -> Option<Param> {
        self.entries.insert(name.into(), p)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    /// Total scalar count over all entries.
    pub fn element_count(&self) -> usize {
        self.entries.values().map(Param::len).sum()
    }

    /// Adds every entry of `other`, replacing same-named ones.
    pub fn extend(&mut self, other: WeightStore) {
        self.entries.extend(other.entries);
    }

    pub fn bit_eq(&self, other: &WeightStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

/// Fan-in of a parameterized layer: the number of inputs feeding one output.
pub fn fan_in(spec: &LayerSpec) -> Option<usize> {
    match *spec {
        LayerSpec::Conv2d {
            in_channels,
            kernel,
            ..
        } => Some(in_channels * kernel * kernel),
        LayerSpec::DepthwiseConv2d { kernel, .. } => Some(kernel * kernel),
        LayerSpec::FullyConnected { in_features, .. } => Some(in_features),
        _ => None,
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases. Each node
/// draws from its own stream keyed by `(seed, node id)`, so a node's weights
/// do not depend on the rest of the graph.
pub fn random_init(graph: &Graph, seed: u64) -> WeightStore {
    let mut ws = WeightStore::new();
    for node in graph.parameterized_nodes() {
        let (wd, bd) = node.spec.param_dims().expect("parameterized");
        let std = (2.0 / fan_in(&node.spec).expect("parameterized") as f64).sqrt();
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&fnv1a(node.id.as_bytes()).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        let normal = Normal::new(0.0, std).expect("finite std");
        let numel: usize = wd.iter().product();
        let data = (0..numel).map(|_| normal.sample(&mut rng) as f32).collect();
        ws.insert(
            WeightStore::weight_name(&node.id),
            Param::new(wd, data).expect("dims match"),
        );
        if let Some(bd) = bd {
            ws.insert(WeightStore::bias_name(&node.id), Param::zeros(bd));
        }
    }
    ws
}
