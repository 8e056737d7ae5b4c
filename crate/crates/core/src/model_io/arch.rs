use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{Graph, GraphInput, Node};
use crate::error::{Error, Result};

pub const ARCH_FORMAT: &str = "snetdet-arch";
pub const ARCH_VERSION: u32 = 1;

/// On-disk architecture description. `edges` is derived from node inputs
/// and checked on import.
#[derive(Debug, Serialize, Deserialize)]
pub struct ArchDoc {
    pub format: String,
    pub version: u32,
    pub inputs: Vec<GraphInput>,
    pub nodes: Vec<Node>,
    pub edges: Vec<[String; 2]>,
    pub outputs: BTreeMap<String, String>,
}

fn edges(nodes: &[Node]) -> Vec<[String; 2]> {
    nodes
        .iter()
        .flat_map(|n| n.inputs.iter().map(|src| [src.clone(), n.id.clone()]))
        .collect()
}

impl ArchDoc {
    pub fn from_graph(g: &Graph) -> Self {
        ArchDoc {
            format: ARCH_FORMAT.to_string(),
            version: ARCH_VERSION,
            inputs: g.inputs().to_vec(),
            nodes: g.nodes().to_vec(),
            edges: edges(g.nodes()),
            outputs: g.outputs().clone(),
        }
    }

    pub fn into_graph(self) -> Result<Graph> {
        if self.format != ARCH_FORMAT || self.version != ARCH_VERSION {
            return Err(Error::Config(format!(
                "unsupported architecture document {} v{}",
                self.format, self.version
            )));
        }
        if self.edges != edges(&self.nodes) {
            return Err(Error::Graph("edge list disagrees with node inputs".into()));
        }
        Graph::from_parts(self.inputs, self.nodes, self.outputs)
    }
}

pub fn export_arch_string(g: &Graph) -> String {
    let mut s = serde_json::to_string_pretty(&ArchDoc::from_graph(g)).expect("serializable");
    s.push('\n');
    s
}

pub fn export_arch(g: &Graph, path: impl AsRef<Path>) -> Result<String> {
    let s = export_arch_string(g);
    fs::write(path, &s)?;
    Ok(s)
}

pub fn import_arch_str(s: &str) -> Result<Graph> {
    let doc: ArchDoc = serde_json::from_str(s)?;
    doc.into_graph()
}

pub fn import_arch(path: impl AsRef<Path>) -> Result<Graph> {
    import_arch_str(&fs::read_to_string(path)?)
}
