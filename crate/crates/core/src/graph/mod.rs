//! Multimodal graph storage, hop distances and per-modality subgraph induction.

mod io;
mod subgraph;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_graph, parse_graph, write_graph};
pub use subgraph::{adjacency_matrix, induce_subgraph, induced_adjacency, Subgraph, SubgraphPolicy};

pub type NodeId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub text: Option<String>,
    pub image_feature: Option<Vec<f64>>,
}

impl NodeRecord {
    pub fn has(&self, modality: Modality) -> bool {
        match modality {
            Modality::Text => self.text.is_some(),
            Modality::Image => self.image_feature.is_some(),
        }
    }
}

/// Undirected multimodal graph with one edge set per modality.
///
/// Text edges only join nodes that both carry text, image edges only join
/// nodes that both carry an image feature. Edges are stored as `(min, max)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalGraph {
    nodes: BTreeMap<NodeId, NodeRecord>,
    text_edges: BTreeSet<(NodeId, NodeId)>,
    image_edges: BTreeSet<(NodeId, NodeId)>,
    text_adj: BTreeMap<NodeId, BTreeSet<NodeId>>,
    image_adj: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl MultimodalGraph {
    /// Builds a graph, rejecting any violation of the storage invariants.
    pub fn new(
        nodes: Vec<NodeRecord>,
        text_edges: &[(NodeId, NodeId)],
        image_edges: &[(NodeId, NodeId)],
    ) -> Result<Self> {
        let mut graph = Self {
            nodes: BTreeMap::new(),
            text_edges: BTreeSet::new(),
            image_edges: BTreeSet::new(),
            text_adj: BTreeMap::new(),
            image_adj: BTreeMap::new(),
        };
        let mut image_dim = None;
        for node in nodes {
            validate_node(&node, &mut image_dim)?;
            let id = node.id;
            if graph.nodes.insert(id, node).is_some() {
                return Err(Error::Validation(format!("duplicate node id {id}")));
            }
        }
        for (i, &(a, b)) in text_edges.iter().enumerate() {
            graph
                .insert_edge(Modality::Text, a, b)
                .map_err(|e| Error::Validation(format!("text_edges[{i}]: {e}")))?;
        }
        for (i, &(a, b)) in image_edges.iter().enumerate() {
            graph
                .insert_edge(Modality::Image, a, b)
                .map_err(|e| Error::Validation(format!("image_edges[{i}]: {e}")))?;
        }
        Ok(graph)
    }

    fn insert_edge(&mut self, modality: Modality, a: NodeId, b: NodeId) -> std::result::Result<(), String> {
        if a == b {
            return Err(format!("self-pair [{a}, {b}]"));
        }
        for id in [a, b] {
            let node = self
                .nodes
                .get(&id)
                .ok_or_else(|| format!("edge [{a}, {b}] references unknown node {id}"))?;
            if !node.has(modality) {
                return Err(format!(
                    "edge [{a}, {b}]: node {id} has no {} attribute",
                    modality.name()
                ));
            }
        }
        let key = (a.min(b), a.max(b));
        let (edges, adj) = match modality {
            Modality::Text => (&mut self.text_edges, &mut self.text_adj),
            Modality::Image => (&mut self.image_edges, &mut self.image_adj),
        };
        if !edges.insert(key) {
            return Err(format!("duplicate edge [{a}, {b}]"));
        }
        adj.entry(a).or_default().insert(b);
        adj.entry(b).or_default().insert(a);
        Ok(())
    }

    pub fn node(&self, id: NodeId) -> Result<&NodeRecord> {
        self.nodes.get(&id).ok_or(Error::Lookup(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self, modality: Modality) -> &BTreeSet<(NodeId, NodeId)> {
        match modality {
            Modality::Text => &self.text_edges,
            Modality::Image => &self.image_edges,
        }
    }

    pub fn has_edge(&self, modality: Modality, a: NodeId, b: NodeId) -> bool {
        self.edges(modality).contains(&(a.min(b), a.max(b)))
    }

    /// Neighbors of `id` under `modality`, in ascending id order.
    pub fn neighbors(&self, modality: Modality, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        let adj = match modality {
            Modality::Text => &self.text_adj,
            Modality::Image => &self.image_adj,
        };
        adj.get(&id).into_iter().flatten().copied()
    }

    /// Dimension shared by all image features, if any node has one.
    pub fn image_dim(&self) -> Option<usize> {
        self.nodes
            .values()
            .find_map(|n| n.image_feature.as_ref().map(Vec::len))
    }
}

fn validate_node(node: &NodeRecord, image_dim: &mut Option<usize>) -> Result<()> {
    let id = node.id;
    if node.text.is_none() && node.image_feature.is_none() {
        return Err(Error::Validation(format!(
            "node {id} has neither text nor image_feature"
        )));
    }
    if let Some(feature) = &node.image_feature {
        if feature.is_empty() {
            return Err(Error::Validation(format!("node {id} has an empty image_feature")));
        }
        if feature.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("node {id} has a non-finite image_feature")));
        }
        match image_dim {
            Some(d) if *d != feature.len() => {
                return Err(Error::Validation(format!(
                    "node {id} image_feature has length {}, expected {d}",
                    feature.len()
                )))
            }
            _ => *image_dim = Some(feature.len()),
        }
    }
    Ok(())
}

/// Breadth-first hop count from `start` to every node reachable within
/// `tau` hops over the `modality` edge set. `start` maps to 0.
pub fn hop_distances(
    graph: &MultimodalGraph,
    start: NodeId,
    tau: usize,
    modality: Modality,
) -> Result<BTreeMap<NodeId, usize>> {
    let node = graph.node(start)?;
    if !node.has(modality) {
        return Err(Error::Attribute(format!(
            "node {start} has no {} attribute",
            modality.name()
        )));
    }
    let mut dist = BTreeMap::from([(start, 0usize)]);
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        let du = dist[&u];
        if du == tau {
            continue;
        }
        for v in graph.neighbors(modality, u) {
            if let std::collections::btree_map::Entry::Vacant(slot) = dist.entry(v) {
                slot.insert(du + 1);
                queue.push_back(v);
            }
        }
    }
    Ok(dist)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn text_node(id: NodeId) -> NodeRecord {
        NodeRecord {
            id,
            text: Some(format!("node {id}")),
            image_feature: None,
        }
    }

    pub(crate) fn text_graph(n: u64, edges: &[(NodeId, NodeId)]) -> MultimodalGraph {
        MultimodalGraph::new((0..n).map(text_node).collect(), edges, &[]).unwrap()
    }

    #[test]
    fn path_distances() {
        let g = text_graph(3, &[(0, 1), (1, 2)]);
        let d = hop_distances(&g, 0, 2, Modality::Text).unwrap();
        assert_eq!(d, BTreeMap::from([(0, 0), (1, 1), (2, 2)]));
        let d = hop_distances(&g, 0, 1, Modality::Text).unwrap();
        assert_eq!(d, BTreeMap::from([(0, 0), (1, 1)]));
    }

    #[test]
    fn lookup_and_attribute_errors() {
        let g = text_graph(2, &[(0, 1)]);
        assert!(matches!(hop_distances(&g, 9, 2, Modality::Text), Err(Error::Lookup(9))));
        assert!(matches!(hop_distances(&g, 0, 2, Modality::Image), Err(Error::Attribute(_))));
    }

    #[test]
    fn storage_invariants() {
        let nodes = || (0..3).map(text_node).collect::<Vec<_>>();
        assert!(MultimodalGraph::new(nodes(), &[(0, 0)], &[]).is_err());
        assert!(MultimodalGraph::new(nodes(), &[(0, 1), (1, 0)], &[]).is_err());
        assert!(MultimodalGraph::new(nodes(), &[(0, 7)], &[]).is_err());
        // image edge between text-only nodes
        assert!(MultimodalGraph::new(nodes(), &[], &[(0, 1)]).is_err());
        let empty = NodeRecord {
            id: 5,
            text: None,
            image_feature: None,
        };
        assert!(MultimodalGraph::new(vec![empty], &[], &[]).is_err());
        let mut dup = nodes();
        dup.push(text_node(1));
        assert!(MultimodalGraph::new(dup, &[], &[]).is_err());
    }

    #[test]
    fn mismatched_image_dims_rejected() {
        let a = NodeRecord {
            id: 0,
            text: None,
            image_feature: Some(vec![1.0, 2.0]),
        };
        let b = NodeRecord {
            id: 1,
            text: None,
            image_feature: Some(vec![1.0]),
        };
        assert!(MultimodalGraph::new(vec![a, b], &[], &[]).is_err());
    }
}
