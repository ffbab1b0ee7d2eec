use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{hop_distances, Modality, MultimodalGraph, NodeId};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

/// How a target's neighborhood is cut down to a subgraph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubgraphPolicy {
    pub tau: usize,
    pub max_nodes: usize,
    pub keep_all_first_hop: bool,
    /// Nodes sampled per hop beyond the first (and at hop 1 when
    /// `keep_all_first_hop` is off).
    pub second_hop_sample_count: usize,
    pub rng_seed: u64,
}

impl Default for SubgraphPolicy {
    fn default() -> Self {
        Self {
            tau: 2,
            max_nodes: 11,
            keep_all_first_hop: true,
            second_hop_sample_count: 2,
            rng_seed: 0,
        }
    }
}

impl SubgraphPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.max_nodes == 0 {
            return Err(Error::Validation("subgraph max_nodes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Target-rooted neighborhood in a fixed node order with its induced
/// binary adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct Subgraph {
    pub target: NodeId,
    /// `(node, hop)`: target first, hops non-decreasing, ties by ascending id.
    pub ordered_nodes: Vec<(NodeId, usize)>,
    pub adjacency: Matrix,
    pub modality: Modality,
}

impl Subgraph {
    pub fn len(&self) -> usize {
        self.ordered_nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordered_nodes.is_empty()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.ordered_nodes.iter().map(|(id, _)| *id).collect()
    }

    pub fn hops(&self) -> Vec<usize> {
        self.ordered_nodes.iter().map(|(_, h)| *h).collect()
    }

    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.ordered_nodes.iter().position(|(n, _)| *n == id)
    }

    pub fn max_hop(&self) -> usize {
        self.ordered_nodes.iter().map(|(_, h)| *h).max().unwrap_or(0)
    }
}

/// Extracts the `modality` subgraph around `target` under `policy`.
///
/// Hops come from the full graph before any sampling. All first-hop
/// neighbors are kept when the policy says so; every deeper hop contributes
/// `second_hop_sample_count` nodes drawn without replacement from a stream
/// keyed by `(rng_seed, target)`. Over the cap, the deepest hop is trimmed
/// first, highest node id first.
pub fn induce_subgraph(
    graph: &MultimodalGraph,
    target: NodeId,
    policy: &SubgraphPolicy,
    modality: Modality,
) -> Result<Subgraph> {
    policy.validate()?;
    let dist = hop_distances(graph, target, policy.tau, modality)?;
    let mut by_hop: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    for (&id, &hop) in &dist {
        if hop > 0 {
            by_hop.entry(hop).or_default().push(id);
        }
    }
    let mut rng = SeededRng::new(policy.rng_seed).split(target);
    let mut selected: Vec<(NodeId, usize)> = vec![(target, 0)];
    for (&hop, candidates) in &by_hop {
        let chosen = if hop == 1 && policy.keep_all_first_hop {
            candidates.clone()
        } else {
            rng.sample_without_replacement(candidates, policy.second_hop_sample_count)
        };
        selected.extend(chosen.into_iter().map(|id| (id, hop)));
    }
    // sort by (hop, id); target is the unique hop-0 entry
    selected.sort_by_key(|&(id, hop)| (hop, id));
    while selected.len() > policy.max_nodes {
        let deepest = selected.last().map(|&(_, h)| h).unwrap_or(0);
        let evict = selected
            .iter()
            .enumerate()
            .filter(|(_, (_, h))| *h == deepest)
            .max_by_key(|(_, (id, _))| *id)
            .map(|(i, _)| i)
            .expect("deepest hop is non-empty");
        selected.remove(evict);
    }
    let ids: Vec<NodeId> = selected.iter().map(|(id, _)| *id).collect();
    let adjacency = induced_adjacency(graph, &ids, modality);
    Ok(Subgraph {
        target,
        ordered_nodes: selected,
        adjacency,
        modality,
    })
}

/// Binary adjacency of `modality` edges restricted to `nodes`, in the given order.
pub fn induced_adjacency(graph: &MultimodalGraph, nodes: &[NodeId], modality: Modality) -> Matrix {
    let n = nodes.len().max(1);
    Matrix::from_fn(n, n, |i, j| {
        if i < nodes.len() && j < nodes.len() && graph.has_edge(modality, nodes[i], nodes[j]) {
            1.0
        } else {
            0.0
        }
    })
}

/// The subgraph's adjacency in `ordered_nodes` order.
pub fn adjacency_matrix(subgraph: &Subgraph) -> Matrix {
    subgraph.adjacency.clone()
}
