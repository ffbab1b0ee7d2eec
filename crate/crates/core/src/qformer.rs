//! Multi-mapping query transformer.
//!
//! `n_q` learnable query tokens per visual node are refined by L blocks of
//! shared self-attention over `[queries; text rows]`, cross-attention into
//! the visual rows, and a two-layer feed-forward network. The final query
//! rows are the MM tokens handed to the downstream sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Parameter, SeededRng, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const FFN_MULTIPLIER: usize = 4;
pub const QUERY_INIT_STD: f64 = 0.02;

const CHECKPOINT_MAGIC: &[u8; 4] = b"MMQF";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QFormerConfig {
    pub d: usize,
    pub heads: usize,
    pub n_q: usize,
    pub blocks: usize,
    pub layer_norm: bool,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 8,
            n_q: 4,
            blocks: 1,
            layer_norm: false,
        }
    }
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.n_q == 0 {
            return Err(Error::Validation("qformer d, heads and n_q must be positive".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Validation(format!(
                "qformer width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.blocks == 0 {
            return Err(Error::Validation("qformer needs at least one block".into()));
        }
        Ok(())
    }

    pub fn options(&self) -> BlockOptions {
        BlockOptions {
            heads: self.heads,
            layer_norm: self.layer_norm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockOptions {
    pub heads: usize,
    pub layer_norm: bool,
}

impl BlockOptions {
    pub fn heads(heads: usize) -> Self {
        Self {
            heads,
            layer_norm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QFormerBlock {
    pub self_wq: Parameter,
    pub self_wk: Parameter,
    pub self_wv: Parameter,
    pub cross_wq: Parameter,
    pub cross_wk: Parameter,
    pub cross_wv: Parameter,
    pub ffn_w1: Parameter,
    pub ffn_b1: Parameter,
    pub ffn_w2: Parameter,
    pub ffn_b2: Parameter,
}

/// Tape handles for one block, in [`QFormerBlock::parameters`] order.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub self_wq: Var,
    pub self_wk: Var,
    pub self_wv: Var,
    pub cross_wq: Var,
    pub cross_wk: Var,
    pub cross_wv: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

pub const BLOCK_PARAMETER_COUNT: usize = 10;

impl QFormerBlock {
    fn build(index: usize, d: usize, mut fill: impl FnMut(usize, usize) -> Matrix) -> Self {
        let hidden = FFN_MULTIPLIER * d;
        let mut p = |name: &str, rows: usize, cols: usize| {
            Parameter::new(format!("block{index}.{name}"), fill(rows, cols))
        };
        Self {
            self_wq: p("self.wq", d, d),
            self_wk: p("self.wk", d, d),
            self_wv: p("self.wv", d, d),
            cross_wq: p("cross.wq", d, d),
            cross_wk: p("cross.wk", d, d),
            cross_wv: p("cross.wv", d, d),
            ffn_w1: p("ffn.w1", d, hidden),
            ffn_b1: Parameter::new(format!("block{index}.ffn.b1"), Matrix::zeros(1, hidden)),
            ffn_w2: p("ffn.w2", hidden, d),
            ffn_b2: Parameter::new(format!("block{index}.ffn.b2"), Matrix::zeros(1, d)),
        }
    }

    pub fn zeros(index: usize, d: usize) -> Self {
        Self::build(index, d, Matrix::zeros)
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn random(index: usize, d: usize, rng: &mut SeededRng) -> Self {
        Self::build(index, d, |rows, cols| rng.gaussian_matrix(rows, cols, 1.0 / (rows as f64).sqrt()))
    }

    pub fn d(&self) -> usize {
        self.self_wq.value.rows()
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        vec![
            &self.self_wq,
            &self.self_wk,
            &self.self_wv,
            &self.cross_wq,
            &self.cross_wk,
            &self.cross_wv,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
        ]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.self_wq,
            &mut self.self_wk,
            &mut self.self_wv,
            &mut self.cross_wq,
            &mut self.cross_wk,
            &mut self.cross_wv,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> BlockVars {
        let vars: Vec<Var> = self.parameters().into_iter().map(|p| tape.param(p)).collect();
        BlockVars::from_slice(&vars)
    }
}

impl BlockVars {
    pub fn from_slice(v: &[Var]) -> Self {
        assert_eq!(v.len(), BLOCK_PARAMETER_COUNT, "block variable count");
        Self {
            self_wq: v[0],
            self_wk: v[1],
            self_wv: v[2],
            cross_wq: v[3],
            cross_wk: v[4],
            cross_wv: v[5],
            ffn_w1: v[6],
            ffn_b1: v[7],
            ffn_w2: v[8],
            ffn_b2: v[9],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QFormerStack {
    pub blocks: Vec<QFormerBlock>,
    /// `l_P x d` initial query tokens, `l_P = visual_nodes * n_q`.
    pub query_init: Parameter,
    pub n_q: usize,
    pub visual_nodes: usize,
    pub options: BlockOptions,
}

/// Tape handles for a stack, in [`QFormerStack::parameters`] order.
#[derive(Clone, Debug)]
pub struct StackVars {
    pub query_init: Var,
    pub blocks: Vec<BlockVars>,
}

impl StackVars {
    pub fn from_slice(v: &[Var]) -> Self {
        Self {
            query_init: v[0],
            blocks: v[1..]
                .chunks(BLOCK_PARAMETER_COUNT)
                .map(BlockVars::from_slice)
                .collect(),
        }
    }
}

impl QFormerStack {
    pub fn new(config: &QFormerConfig, visual_nodes: usize, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        if visual_nodes == 0 {
            return Err(Error::Contract("qformer needs at least one visual node".into()));
        }
        let l_p = visual_nodes * config.n_q;
        let query_init = Parameter::new("query_init", rng.gaussian_matrix(l_p, config.d, QUERY_INIT_STD));
        let blocks = (0..config.blocks)
            .map(|i| QFormerBlock::random(i, config.d, rng))
            .collect();
        Ok(Self {
            blocks,
            query_init,
            n_q: config.n_q,
            visual_nodes,
            options: config.options(),
        })
    }

    pub fn l_p(&self) -> usize {
        self.query_init.value.rows()
    }

    pub fn d(&self) -> usize {
        self.query_init.value.cols()
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.query_init];
        for b in &self.blocks {
            out.extend(b.parameters());
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.query_init];
        for b in &mut self.blocks {
            out.extend(b.parameters_mut());
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> StackVars {
        let vars: Vec<Var> = self.parameters().into_iter().map(|p| tape.param(p)).collect();
        StackVars::from_slice(&vars)
    }

    fn check(&self) -> Result<()> {
        if self.l_p() != self.visual_nodes * self.n_q {
            return Err(Error::Contract(format!(
                "query tokens {} != visual nodes {} x n_q {}",
                self.l_p(),
                self.visual_nodes,
                self.n_q
            )));
        }
        if self.blocks.is_empty() {
            return Err(Error::Contract("qformer stack has no blocks".into()));
        }
        Ok(())
    }

    /// Overwrites parameters by name from checkpoint bytes; every stack
    /// parameter must be present with a matching shape.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        let loaded = read_checkpoint(bytes)?;
        for p in self.parameters_mut() {
            let src = loaded
                .iter()
                .find(|l| l.name == p.name)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks {}", p.name)))?;
            if src.shape() != p.shape() {
                return Err(Error::Validation(format!(
                    "checkpoint {} has shape {:?}, stack expects {:?}",
                    p.name,
                    src.shape(),
                    p.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Vec<u8> {
        write_checkpoint(&self.parameters())
    }
}

/// Serializes parameters as `MMQF`, version, count, then per parameter
/// `name_len, name, rows, cols, f32 payload`; integers are little-endian u32.
pub fn write_checkpoint(params: &[&Parameter]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for x in p.value.as_slice() {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<Parameter>> {
    let mut cursor = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(Error::Validation("checkpoint truncated".into()));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Validation("not a qformer checkpoint".into()));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let version = u32_at(take(4)?);
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Validation(format!("unsupported checkpoint version {version}")));
    }
    let count = u32_at(take(4)?);
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32_at(take(4)?);
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| Error::Validation("parameter name is not utf-8".into()))?
            .to_string();
        let rows = u32_at(take(4)?);
        let cols = u32_at(take(4)?);
        let payload = take(4 * rows * cols)?;
        let values = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        params.push(Parameter::new(name, Matrix::new(rows, cols, values)?));
    }
    if !cursor.is_empty() {
        return Err(Error::Validation("trailing bytes after checkpoint".into()));
    }
    Ok(params)
}

fn layer_norm_on(tape: &mut Tape, x: Var) -> Result<Var> {
    let d = tape.shape(x).1;
    let averager = tape.leaf(Matrix::filled(d, d, 1.0 / d as f64));
    let mean = tape.matmul(x, averager)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.hadamard(centered, centered)?;
    let var = tape.matmul(sq, averager)?;
    let inv = tape.inv_sqrt(var, LAYER_NORM_EPS)?;
    tape.hadamard(centered, inv)
}

fn residual(tape: &mut Tape, x: Var, delta: Var, options: BlockOptions) -> Result<Var> {
    let out = tape.add(x, delta)?;
    if options.layer_norm {
        layer_norm_on(tape, out)
    } else {
        Ok(out)
    }
}

/// Multi-head scaled dot-product attention without residual: queries from
/// `q_in`, keys and values from `kv_in`.
pub fn multi_head_attention_on(
    tape: &mut Tape,
    q_in: Var,
    kv_in: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    heads: usize,
) -> Result<Var> {
    let d = tape.shape(q_in).1;
    if tape.shape(kv_in).1 != d {
        return Err(Error::Dimension(format!(
            "query width {d}, key/value width {}",
            tape.shape(kv_in).1
        )));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Validation(format!("width {d} not divisible by {heads} heads")));
    }
    let q = tape.matmul(q_in, w_q)?;
    let k = tape.matmul(kv_in, w_k)?;
    let v = tape.matmul(kv_in, w_v)?;
    let width = d / heads;
    let scale = 1.0 / (width as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * width, width)?;
        let kh = tape.slice_cols(k, h * width, width)?;
        let vh = tape.slice_cols(v, h * width, width)?;
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale);
        let weights = tape.row_softmax(logits, None)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    tape.concat_cols(&outs)
}

/// Self-attention over `[q_prev; h_t]` with residual, keeping the first
/// `l_P` rows.
pub fn shared_self_attention_on(
    tape: &mut Tape,
    q_prev: Var,
    h_t: Option<Var>,
    block: &BlockVars,
    options: BlockOptions,
) -> Result<Var> {
    let l_p = tape.shape(q_prev).0;
    let joint = match h_t {
        Some(t) => tape.concat_rows(&[q_prev, t])?,
        None => q_prev,
    };
    let attended = multi_head_attention_on(
        tape,
        joint,
        joint,
        block.self_wq,
        block.self_wk,
        block.self_wv,
        options.heads,
    )?;
    let updated = residual(tape, joint, attended, options)?;
    tape.slice_rows(updated, 0, l_p)
}

pub fn cross_attention_on(
    tape: &mut Tape,
    q: Var,
    h_p: Var,
    block: &BlockVars,
    options: BlockOptions,
) -> Result<Var> {
    let attended = multi_head_attention_on(
        tape,
        q,
        h_p,
        block.cross_wq,
        block.cross_wk,
        block.cross_wv,
        options.heads,
    )?;
    residual(tape, q, attended, options)
}

/// `Q + relu(Q W1 + b1) W2 + b2`
pub fn ffn_on(tape: &mut Tape, q: Var, block: &BlockVars, options: BlockOptions) -> Result<Var> {
    let hidden = tape.matmul(q, block.ffn_w1)?;
    let hidden = tape.add_row_broadcast(hidden, block.ffn_b1)?;
    let hidden = tape.relu(hidden);
    let out = tape.matmul(hidden, block.ffn_w2)?;
    let out = tape.add_row_broadcast(out, block.ffn_b2)?;
    residual(tape, q, out, options)
}

pub fn qformer_forward_on(
    tape: &mut Tape,
    stack: &StackVars,
    h_t: Option<Var>,
    h_p: Var,
    options: BlockOptions,
) -> Result<Var> {
    let mut q = stack.query_init;
    for block in &stack.blocks {
        q = shared_self_attention_on(tape, q, h_t, block, options)?;
        q = cross_attention_on(tape, q, h_p, block, options)?;
        q = ffn_on(tape, q, block, options)?;
    }
    Ok(q)
}

fn check_width(what: &str, m: &Matrix, d: usize) -> Result<()> {
    if m.cols() != d {
        return Err(Error::Dimension(format!("{what} has width {}, expected {d}", m.cols())));
    }
    Ok(())
}

/// `h_t = None` means the text subgraph is empty.
pub fn shared_self_attention(
    q_prev: &Matrix,
    h_t: Option<&Matrix>,
    block: &QFormerBlock,
    options: BlockOptions,
) -> Result<Matrix> {
    check_width("query tokens", q_prev, block.d())?;
    if let Some(t) = h_t {
        check_width("text embeddings", t, block.d())?;
    }
    let mut tape = Tape::new();
    let q = tape.leaf(q_prev.clone());
    let t = h_t.map(|t| tape.leaf(t.clone()));
    let vars = block.bind(&mut tape);
    let out = shared_self_attention_on(&mut tape, q, t, &vars, options)?;
    Ok(tape.value(out).clone())
}

/// `h_p = None` (no visual rows) violates the contract.
pub fn cross_attention(
    q: &Matrix,
    h_p: Option<&Matrix>,
    block: &QFormerBlock,
    options: BlockOptions,
) -> Result<Matrix> {
    let h_p = h_p.ok_or_else(|| Error::Contract("cross-attention needs at least one visual row".into()))?;
    check_width("query tokens", q, block.d())?;
    check_width("visual embeddings", h_p, block.d())?;
    let mut tape = Tape::new();
    let qv = tape.leaf(q.clone());
    let pv = tape.leaf(h_p.clone());
    let vars = block.bind(&mut tape);
    let out = cross_attention_on(&mut tape, qv, pv, &vars, options)?;
    Ok(tape.value(out).clone())
}

pub fn ffn(q: &Matrix, block: &QFormerBlock, options: BlockOptions) -> Result<Matrix> {
    check_width("query tokens", q, block.d())?;
    let mut tape = Tape::new();
    let qv = tape.leaf(q.clone());
    let vars = block.bind(&mut tape);
    let out = ffn_on(&mut tape, qv, &vars, options)?;
    Ok(tape.value(out).clone())
}

/// MM tokens `f(c_P)`, `l_P x d`.
pub fn qformer_forward(stack: &QFormerStack, h_t: Option<&Matrix>, h_p: &Matrix) -> Result<Matrix> {
    stack.check()?;
    if h_p.rows() != stack.visual_nodes {
        return Err(Error::Contract(format!(
            "{} visual rows for a stack built for {}",
            h_p.rows(),
            stack.visual_nodes
        )));
    }
    check_width("visual embeddings", h_p, stack.d())?;
    if let Some(t) = h_t {
        check_width("text embeddings", t, stack.d())?;
    }
    let mut tape = Tape::new();
    let vars = stack.bind(&mut tape);
    let t = h_t.map(|t| tape.leaf(t.clone()));
    let p = tape.leaf(h_p.clone());
    let out = qformer_forward_on(&mut tape, &vars, t, p, stack.options)?;
    Ok(tape.value(out).clone())
}
