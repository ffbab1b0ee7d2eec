//! Seeded synthetic graphs for desk-scale runs.

use serde::{Deserialize, Serialize};

use crate::encoders::{StubEncoder, DEFAULT_IMAGE_DIM};
use crate::error::{Error, Result};
use crate::graph::{MultimodalGraph, NodeId, NodeRecord};
use crate::numerics::SeededRng;

const VOCABULARY: &[&str] = &[
    "red", "blue", "green", "cotton", "leather", "vintage", "classic", "slim", "casual", "formal",
    "shirt", "jacket", "shoe", "boot", "scarf", "watch", "sock", "dress", "sweater", "wallet",
    "summer", "winter", "sport", "travel", "office", "party", "soft", "warm", "light", "dark",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticGraphSpec {
    pub block_sizes: Vec<usize>,
    pub p_intra: f64,
    pub p_inter: f64,
    pub image_dim: usize,
    /// Probability that a node carries an image feature.
    pub image_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticGraphSpec {
    fn default() -> Self {
        Self {
            block_sizes: vec![30, 30],
            p_intra: 0.2,
            p_inter: 0.02,
            image_dim: DEFAULT_IMAGE_DIM,
            image_fraction: 0.7,
            seed: 0,
        }
    }
}

impl SyntheticGraphSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_intra", self.p_intra),
            ("p_inter", self.p_inter),
            ("image_fraction", self.image_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.block_sizes.iter().sum::<usize>() == 0 {
            return Err(Error::Validation("synthetic graph needs at least one node".into()));
        }
        if self.image_dim == 0 {
            return Err(Error::Validation("image_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    /// Block index of every node, in id order.
    pub fn block_labels(&self) -> Vec<usize> {
        self.block_sizes
            .iter()
            .enumerate()
            .flat_map(|(b, &size)| std::iter::repeat_n(b, size))
            .collect()
    }
}

/// Stochastic block model over nodes `0..sum(block_sizes)`: each unordered
/// pair is joined with `p_intra` inside a block and `p_inter` across blocks.
/// Pairs are visited in lexicographic order so the draw sequence is fixed.
pub fn stochastic_block_edges(
    block_sizes: &[usize],
    p_intra: f64,
    p_inter: f64,
    rng: &mut SeededRng,
) -> Vec<(NodeId, NodeId)> {
    let labels: Vec<usize> = block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &size)| std::iter::repeat_n(b, size))
        .collect();
    let mut edges = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let p = if labels[i] == labels[j] { p_intra } else { p_inter };
            if rng.bernoulli(p) {
                edges.push((i as NodeId, j as NodeId));
            }
        }
    }
    edges
}

/// Seeded multimodal SBM graph. Every node gets a short synthetic text;
/// an `image_fraction` share also gets a stub image feature. Text edges are
/// the SBM edges, image edges the subset whose endpoints both have images.
pub fn generate_synthetic_graph(spec: &SyntheticGraphSpec) -> Result<MultimodalGraph> {
    spec.validate()?;
    let root = SeededRng::new(spec.seed);
    let mut edge_rng = root.split(1);
    let mut attr_rng = root.split(2);
    let encoder = StubEncoder::with_dims(spec.seed, 1, spec.image_dim);
    let labels = spec.block_labels();
    let mut nodes = Vec::with_capacity(labels.len());
    for (i, block) in labels.iter().enumerate() {
        let words = 3 + attr_rng.below(6);
        let text: Vec<&str> = (0..words).map(|_| VOCABULARY[attr_rng.below(VOCABULARY.len())]).collect();
        let has_image = attr_rng.bernoulli(spec.image_fraction);
        nodes.push(NodeRecord {
            id: i as NodeId,
            text: Some(format!("{} (group {block})", text.join(" "))),
            image_feature: has_image.then(|| encoder.image_vector(&format!("image-{i}"))),
        });
    }
    let text_edges = stochastic_block_edges(&spec.block_sizes, spec.p_intra, spec.p_inter, &mut edge_rng);
    let image_edges: Vec<_> = text_edges
        .iter()
        .copied()
        .filter(|(a, b)| nodes[*a as usize].image_feature.is_some() && nodes[*b as usize].image_feature.is_some())
        .collect();
    MultimodalGraph::new(nodes, &text_edges, &image_edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::write_graph;
    use crate::Modality;

    #[test]
    fn zero_probability_means_no_edges() {
        let spec = SyntheticGraphSpec {
            p_intra: 0.0,
            p_inter: 0.0,
            ..Default::default()
        };
        let g = generate_synthetic_graph(&spec).unwrap();
        assert_eq!(g.node_count(), 60);
        assert!(g.edges(Modality::Text).is_empty());
        assert!(g.edges(Modality::Image).is_empty());
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticGraphSpec {
            seed: 17,
            ..Default::default()
        };
        let a = write_graph(&generate_synthetic_graph(&spec).unwrap()).unwrap();
        let b = write_graph(&generate_synthetic_graph(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = write_graph(
            &generate_synthetic_graph(&SyntheticGraphSpec {
                seed: 18,
                ..spec
            })
            .unwrap(),
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn edge_counts_within_three_sigma() {
        // 2 blocks of 30: 870 intra pairs, 900 inter pairs
        let (intra_pairs, inter_pairs) = (870.0_f64, 900.0_f64);
        for seed in 0..5 {
            let g = generate_synthetic_graph(&SyntheticGraphSpec {
                seed,
                ..Default::default()
            })
            .unwrap();
            let (mut intra, mut inter) = (0.0_f64, 0.0_f64);
            for &(a, b) in g.edges(Modality::Text) {
                if (a < 30) == (b < 30) {
                    intra += 1.0;
                } else {
                    inter += 1.0;
                }
            }
            for (count, pairs, p) in [(intra, intra_pairs, 0.2), (inter, inter_pairs, 0.02)] {
                let mean = pairs * p;
                let sigma = (pairs * p * (1.0 - p)).sqrt();
                assert!((count - mean).abs() <= 3.0 * sigma, "seed {seed}: {count} vs {mean} ± 3·{sigma}");
            }
        }
    }

    #[test]
    fn image_edges_respect_attributes() {
        let g = generate_synthetic_graph(&SyntheticGraphSpec::default()).unwrap();
        for &(a, b) in g.edges(Modality::Image) {
            assert!(g.node(a).unwrap().image_feature.is_some());
            assert!(g.node(b).unwrap().image_feature.is_some());
        }
        assert!(!g.edges(Modality::Image).is_empty());
    }

    #[test]
    fn bad_probability_rejected() {
        assert!(generate_synthetic_graph(&SyntheticGraphSpec {
            p_intra: 1.5,
            ..Default::default()
        })
        .is_err());
    }
}
