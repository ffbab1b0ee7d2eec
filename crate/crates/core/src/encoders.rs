//! Text and image feature providers.
//!
//! The stub encoder stands in for frozen pretrained backbones: tokens and
//! image keys are hashed with a seed into Gaussian vectors, so every run of
//! the pipeline is reproducible from the seed alone. Features produced
//! elsewhere can be fed in through [`PrecomputedFeatures`].

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{MultimodalGraph, NodeRecord, Subgraph};
use crate::numerics::{fnv1a64, Matrix, Parameter, SeededRng, Tape, Var};
use crate::NodeId;

pub const DEFAULT_TEXT_DIM: usize = 64;
pub const DEFAULT_IMAGE_DIM: usize = 32;
pub const DEFAULT_TOKEN_BUDGET: usize = 32;

pub trait TextEncoder {
    fn embed_dim(&self) -> usize;
    /// One row per token, `embed_dim` columns.
    fn encode_tokens(&self, text: &str) -> Matrix;
}

pub trait ImageEncoder {
    fn feature_dim(&self) -> usize;
    fn encode(&self, node: &NodeRecord) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct StubEncoder {
    pub seed: u64,
    pub text_dim: usize,
    pub image_dim: usize,
    pub token_budget: usize,
}

impl Default for StubEncoder {
    fn default() -> Self {
        Self::new(0)
    }
}

impl StubEncoder {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            text_dim: DEFAULT_TEXT_DIM,
            image_dim: DEFAULT_IMAGE_DIM,
            token_budget: DEFAULT_TOKEN_BUDGET,
        }
    }

    pub fn with_dims(seed: u64, text_dim: usize, image_dim: usize) -> Self {
        Self {
            text_dim,
            image_dim,
            ..Self::new(seed)
        }
    }

    fn hashed_gaussian(&self, domain: &[u8], key: &[u8], dim: usize) -> Vec<f64> {
        let mut bytes = self.seed.to_le_bytes().to_vec();
        bytes.extend_from_slice(domain);
        bytes.extend_from_slice(key);
        let mut rng = SeededRng::new(fnv1a64(&bytes));
        (0..dim).map(|_| rng.normal()).collect()
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        self.hashed_gaussian(b"tok:", token.as_bytes(), self.text_dim)
    }

    /// Stub image feature for an opaque image key (a file name, a URL...).
    pub fn image_vector(&self, key: &str) -> Vec<f64> {
        self.hashed_gaussian(b"img:", key.as_bytes(), self.image_dim)
    }
}

impl TextEncoder for StubEncoder {
    fn embed_dim(&self) -> usize {
        self.text_dim
    }

    fn encode_tokens(&self, text: &str) -> Matrix {
        let mut tokens: Vec<&str> = text.split_whitespace().take(self.token_budget).collect();
        if tokens.is_empty() {
            tokens.push("");
        }
        let rows: Vec<Vec<f64>> = tokens.iter().map(|t| self.token_vector(t)).collect();
        Matrix::from_rows(&rows).expect("token rows share the embedding width")
    }
}

impl ImageEncoder for StubEncoder {
    fn feature_dim(&self) -> usize {
        self.image_dim
    }

    /// Inline features are taken to be encoder outputs already.
    fn encode(&self, node: &NodeRecord) -> Result<Vec<f64>> {
        let feature = node
            .image_feature
            .as_ref()
            .ok_or_else(|| Error::Attribute(format!("node {} has no image feature", node.id)))?;
        if feature.len() != self.image_dim {
            return Err(Error::Dimension(format!(
                "node {} image feature has length {}, encoder expects {}",
                node.id,
                feature.len(),
                self.image_dim
            )));
        }
        Ok(feature.clone())
    }
}

/// Mean-pooled text embedding per subgraph node, in subgraph order.
pub fn encode_text_nodes(
    encoder: &dyn TextEncoder,
    subgraph: &Subgraph,
    graph: &MultimodalGraph,
) -> Result<Matrix> {
    let mut rows = Vec::with_capacity(subgraph.len());
    for id in subgraph.node_ids() {
        let node = graph.node(id)?;
        let text = node
            .text
            .as_deref()
            .ok_or_else(|| Error::Attribute(format!("node {id} has no text")))?;
        rows.push(encoder.encode_tokens(text).mean_rows().into_vec());
    }
    Matrix::from_rows(&rows)
}

/// Raw image features per subgraph node, `|V_p| x d_p`.
pub fn image_feature_matrix(
    encoder: &dyn ImageEncoder,
    subgraph: &Subgraph,
    graph: &MultimodalGraph,
) -> Result<Matrix> {
    let mut rows = Vec::with_capacity(subgraph.len());
    for id in subgraph.node_ids() {
        rows.push(encoder.encode(graph.node(id)?)?);
    }
    Matrix::from_rows(&rows)
}

/// `H_P = features · M_proj` with `M_proj` of shape `d_p x d`.
pub fn encode_image_nodes_project(
    encoder: &dyn ImageEncoder,
    subgraph: &Subgraph,
    graph: &MultimodalGraph,
    proj: &Parameter,
) -> Result<Matrix> {
    let features = image_feature_matrix(encoder, subgraph, graph)?;
    let mut tape = Tape::new();
    let f = tape.leaf(features);
    let p = tape.param(proj);
    let out = project_on_tape(&mut tape, f, p)?;
    Ok(tape.value(out).clone())
}

pub fn project_on_tape(tape: &mut Tape, features: Var, proj: Var) -> Result<Var> {
    if tape.shape(features).1 != tape.shape(proj).0 {
        return Err(Error::Dimension(format!(
            "features {:?} cannot be projected by {:?}",
            tape.shape(features),
            tape.shape(proj)
        )));
    }
    tape.matmul(features, proj)
}

/// Image features loaded from the binary feature file plus its JSON sidecar.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputedFeatures {
    pub features: Matrix,
    pub rows: BTreeMap<NodeId, usize>,
}

impl PrecomputedFeatures {
    /// Reads `[u32 count][u32 dim][f32; count*dim]` (little-endian) and a
    /// sidecar JSON object mapping node id to row index.
    pub fn load(features_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(features_path)?;
        let sidecar = std::fs::read_to_string(sidecar_path)?;
        Self::from_parts(&bytes, &sidecar)
    }

    pub fn from_parts(bytes: &[u8], sidecar: &str) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Validation("feature file shorter than its header".into()));
        }
        let count = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        let dim = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let expected = 8 + 4 * count * dim;
        if bytes.len() != expected {
            return Err(Error::Validation(format!(
                "feature file holds {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes[8..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let features = Matrix::new(count, dim, values)?;
        features
            .ensure_finite("feature file")
            .map_err(|e| Error::Validation(e.to_string()))?;
        let rows: BTreeMap<NodeId, usize> = serde_json::from_str(sidecar)?;
        if let Some((id, row)) = rows.iter().find(|(_, r)| **r >= count) {
            return Err(Error::Validation(format!(
                "sidecar maps node {id} to row {row}, file has {count} rows"
            )));
        }
        Ok(Self { features, rows })
    }

    pub fn to_parts(&self) -> Result<(Vec<u8>, String)> {
        let (count, dim) = self.features.shape();
        let mut bytes = Vec::with_capacity(8 + 4 * count * dim);
        bytes.extend_from_slice(&(count as u32).to_le_bytes());
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        for x in self.features.as_slice() {
            bytes.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        Ok((bytes, serde_json::to_string_pretty(&self.rows)?))
    }
}

impl ImageEncoder for PrecomputedFeatures {
    fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    fn encode(&self, node: &NodeRecord) -> Result<Vec<f64>> {
        let row = self
            .rows
            .get(&node.id)
            .ok_or_else(|| Error::Attribute(format!("no precomputed feature for node {}", node.id)))?;
        Ok(self.features.row(*row).to_vec())
    }
}
