//! Input sequence assembly for a downstream language model.
//!
//! The sequence is the instruction, then every text-subgraph node in subgraph
//! order: its text tokens followed, when the node also sits in the visual
//! subgraph, by its `n_q` multimodal tokens.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{hop_aware_update, hop_diffused_update, AttentionWeights, HopDiffusionConfig, HopEmbeddingTable};
use crate::encoders::{encode_image_nodes_project, encode_text_nodes, StubEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::graph::{induce_subgraph, induced_adjacency, Modality, MultimodalGraph, NodeId, Subgraph};
use crate::numerics::{Matrix, Parameter, SeededRng};
use crate::pipeline::config::{ExperimentConfig, StructureMode};
use crate::qformer::{qformer_forward, QFormerStack};

const HOP_TABLE_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    InstructionText,
    NodeText,
    MmToken,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntry {
    /// `None` for instruction tokens.
    pub source: Option<NodeId>,
    pub kind: EntryKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextAssembly {
    pub instruction: String,
    pub entries: Vec<TokenEntry>,
    /// One row per entry.
    pub embeddings: Matrix,
    pub d: usize,
    pub n_q: usize,
}

impl ContextAssembly {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn count(&self, kind: EntryKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    /// Instruction plus node text tokens.
    pub fn l_t(&self) -> usize {
        self.len() - self.l_p()
    }

    pub fn l_p(&self) -> usize {
        self.count(EntryKind::MmToken)
    }

    /// Nodes that own MM tokens, in sequence order.
    pub fn visual_nodes(&self) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = Vec::new();
        for e in &self.entries {
            if e.kind == EntryKind::MmToken {
                let id = e.source.expect("mm tokens carry a node");
                if out.last() != Some(&id) {
                    out.push(id);
                }
            }
        }
        out
    }

    /// Checks the ordering and insertion rules from the tagged entries alone.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Assembly(msg));
        if self.embeddings.rows() != self.entries.len() || self.embeddings.cols() != self.d {
            return fail(format!(
                "embeddings {:?} do not match {} entries of width {}",
                self.embeddings.shape(),
                self.entries.len(),
                self.d
            ));
        }
        let mut seen_node = false;
        for (i, e) in self.entries.iter().enumerate() {
            match (e.kind, e.source) {
                (EntryKind::InstructionText, None) if !seen_node => {}
                (EntryKind::InstructionText, _) => {
                    return fail(format!("instruction entry at {i} follows node entries or has a source"))
                }
                (_, None) => return fail(format!("node entry at {i} has no source")),
                _ => seen_node = true,
            }
        }
        // per node: text run, then optionally one mm run of n_q, then nothing else
        let mut finished: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut i = 0;
        let entries = &self.entries;
        while i < entries.len() {
            let Some(id) = entries[i].source else {
                i += 1;
                continue;
            };
            if let Some(&at) = finished.get(&id) {
                return fail(format!("node {id} reappears at {i} after its block ended at {at}"));
            }
            if entries[i].kind != EntryKind::NodeText {
                return fail(format!("node {id} has mm tokens at {i} before any text"));
            }
            while i < entries.len() && entries[i].source == Some(id) && entries[i].kind == EntryKind::NodeText {
                i += 1;
            }
            let start = i;
            while i < entries.len() && entries[i].source == Some(id) && entries[i].kind == EntryKind::MmToken {
                i += 1;
            }
            let run = i - start;
            if run != 0 && run != self.n_q {
                return fail(format!("node {id} has {run} mm tokens, expected {}", self.n_q));
            }
            if i < entries.len() && entries[i].source == Some(id) {
                return fail(format!("node {id} has text after its mm tokens at {i}"));
            }
            finished.insert(id, i);
        }
        Ok(())
    }

    pub fn check_length(&self, max_len: usize) -> Result<()> {
        if self.len() > max_len {
            return Err(Error::Validation(format!(
                "assembled sequence has {} entries, limit is {max_len}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Interleaves instruction, node text and MM tokens.
///
/// `node_text_tokens[k]` holds the token embeddings of the `k`-th text
/// subgraph node; `mm_tokens` stacks `n_q` rows per visual subgraph node in
/// visual subgraph order.
pub fn assemble_context(
    text_subgraph: &Subgraph,
    visual_subgraph: Option<&Subgraph>,
    instruction: &str,
    instruction_tokens: &Matrix,
    node_text_tokens: &[Matrix],
    mm_tokens: Option<&Matrix>,
    n_q: usize,
) -> Result<ContextAssembly> {
    let d = instruction_tokens.cols();
    if n_q == 0 {
        return Err(Error::Validation("n_q must be positive".into()));
    }
    if node_text_tokens.len() != text_subgraph.len() {
        return Err(Error::Assembly(format!(
            "{} token blocks for {} text nodes",
            node_text_tokens.len(),
            text_subgraph.len()
        )));
    }
    let mut mm_rows: BTreeMap<NodeId, usize> = BTreeMap::new();
    match (visual_subgraph, mm_tokens) {
        (None, None) => {}
        (Some(vs), Some(mm)) => {
            if mm.rows() != vs.len() * n_q {
                return Err(Error::Assembly(format!(
                    "{} mm rows for {} visual nodes with n_q = {n_q}",
                    mm.rows(),
                    vs.len()
                )));
            }
            for (k, id) in vs.node_ids().into_iter().enumerate() {
                if text_subgraph.position(id).is_none() {
                    return Err(Error::Assembly(format!(
                        "visual node {id} is absent from the text node order"
                    )));
                }
                mm_rows.insert(id, k * n_q);
            }
        }
        _ => {
            return Err(Error::Assembly(
                "visual subgraph and mm tokens must be given together".into(),
            ))
        }
    }
    let mut entries = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut push = |m: &Matrix, range: std::ops::Range<usize>, entry: TokenEntry| -> Result<()> {
        if m.cols() != d {
            return Err(Error::Dimension(format!("token width {} differs from {d}", m.cols())));
        }
        for r in range {
            entries.push(entry.clone());
            rows.push(m.row(r).to_vec());
        }
        Ok(())
    };
    push(
        instruction_tokens,
        0..instruction_tokens.rows(),
        TokenEntry {
            source: None,
            kind: EntryKind::InstructionText,
        },
    )?;
    for (id, tokens) in text_subgraph.node_ids().into_iter().zip(node_text_tokens) {
        push(
            tokens,
            0..tokens.rows(),
            TokenEntry {
                source: Some(id),
                kind: EntryKind::NodeText,
            },
        )?;
        if let (Some(&start), Some(mm)) = (mm_rows.get(&id), mm_tokens) {
            push(
                mm,
                start..start + n_q,
                TokenEntry {
                    source: Some(id),
                    kind: EntryKind::MmToken,
                },
            )?;
        }
    }
    let assembly = ContextAssembly {
        instruction: instruction.to_string(),
        entries,
        embeddings: Matrix::from_rows(&rows)?,
        d,
        n_q,
    };
    assembly.validate()?;
    Ok(assembly)
}

/// `subgraph` restricted to the nodes also present in `keep`, order preserved.
pub fn restrict_subgraph(graph: &MultimodalGraph, subgraph: &Subgraph, keep: &Subgraph) -> Subgraph {
    let ordered_nodes: Vec<(NodeId, usize)> = subgraph
        .ordered_nodes
        .iter()
        .copied()
        .filter(|(id, _)| keep.position(*id).is_some())
        .collect();
    let ids: Vec<NodeId> = ordered_nodes.iter().map(|(id, _)| *id).collect();
    Subgraph {
        target: subgraph.target,
        adjacency: induced_adjacency(graph, &ids, subgraph.modality),
        ordered_nodes,
        modality: subgraph.modality,
    }
}

/// Applies the configured structure module with seeded, untrained weights.
pub fn structure_update(
    h: &Matrix,
    subgraph: &Subgraph,
    mode: StructureMode,
    diffusion: &HopDiffusionConfig,
    rng: &mut SeededRng,
) -> Result<Matrix> {
    match mode {
        StructureMode::HopDiffused => {
            let weights = AttentionWeights::random(h.cols(), diffusion.heads, rng);
            hop_diffused_update(h, &subgraph.adjacency, &weights, diffusion)
        }
        StructureMode::HopAware => {
            let table = HopEmbeddingTable::random(subgraph.max_hop(), h.cols(), HOP_TABLE_STD, rng);
            hop_aware_update(h, &subgraph.hops(), &table)
        }
        StructureMode::None => Ok(h.clone()),
    }
}

/// Runs subgraph extraction, stub encoding, the structure module and the
/// QFormer for `target`, then assembles the sequence.
///
/// Visual nodes missing from the text subgraph are dropped before the QFormer
/// so that every MM token has a text anchor.
pub fn build_context(
    graph: &MultimodalGraph,
    target: NodeId,
    instruction: &str,
    config: &ExperimentConfig,
) -> Result<ContextAssembly> {
    config.validate()?;
    let d = config.dims.d;
    let root = SeededRng::new(config.seed);
    let encoder = StubEncoder::with_dims(config.seed, d, config.dims.d_p);
    let text_sg = induce_subgraph(graph, target, &config.subgraph.text, Modality::Text)?;
    let mut node_tokens = Vec::with_capacity(text_sg.len());
    for id in text_sg.node_ids() {
        let text = graph.node(id)?.text.as_deref().unwrap_or_default();
        node_tokens.push(encoder.encode_tokens(text));
    }
    let instruction_tokens = encoder.encode_tokens(instruction);

    let visual = if graph.node(target)?.image_feature.is_some() {
        let full = induce_subgraph(graph, target, &config.subgraph.image, Modality::Image)?;
        Some(restrict_subgraph(graph, &full, &text_sg))
    } else {
        None
    };
    let mm = match &visual {
        None => None,
        Some(vs) => {
            let h_t = encode_text_nodes(&encoder, &text_sg, graph)?;
            let h_t = structure_update(&h_t, &text_sg, config.mode, &config.diffusion.text, &mut root.split(31))?;
            let d_p = graph.image_dim().unwrap_or(config.dims.d_p);
            let proj = Parameter::new(
                "proj",
                root.split(33).gaussian_matrix(d_p, d, 1.0 / (d_p as f64).sqrt()),
            );
            let image_encoder = StubEncoder::with_dims(config.seed, d, d_p);
            let h_p = encode_image_nodes_project(&image_encoder, vs, graph, &proj)?;
            let h_p = structure_update(&h_p, vs, config.mode, &config.diffusion.image, &mut root.split(32))?;
            let stack = QFormerStack::new(&config.qformer(), vs.len(), &mut root.split(34))?;
            Some(qformer_forward(&stack, Some(&h_t), &h_p)?)
        }
    };
    let assembly = assemble_context(
        &text_sg,
        visual.as_ref(),
        instruction,
        &instruction_tokens,
        &node_tokens,
        mm.as_ref(),
        config.dims.n_q,
    )?;
    assembly.check_length(config.max_input_length)?;
    Ok(assembly)
}
