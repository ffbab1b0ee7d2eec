//! Hop-diffused attention: neighbor-masked self-attention, geometric
//! diffusion of the attention matrix with a residual update, the lighter
//! hop-aware variant, and the personalized-PageRank closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{solve_linear_system, Matrix, Parameter, SeededRng, Tape, Var};

/// Row sums must be within this of 1 for an input to count as stochastic.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Non-neighbor logits are sent to -inf before a single softmax.
    LogitMask,
    /// `softmax(M ⊙ softmax(logits))`, composed literally.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HopDiffusionConfig {
    pub alpha: f64,
    pub diffusion_steps: usize,
    pub heads: usize,
    pub mask_mode: MaskMode,
    pub renormalize_truncation: bool,
}

impl Default for HopDiffusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            diffusion_steps: 2,
            heads: 8,
            mask_mode: MaskMode::LogitMask,
            renormalize_truncation: true,
        }
    }
}

impl HopDiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Validation(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.heads == 0 {
            return Err(Error::Validation("heads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn validate_width(&self, d: usize) -> Result<()> {
        self.validate()?;
        if !d.is_multiple_of(self.heads) {
            return Err(Error::Validation(format!(
                "width {d} is not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }

    /// `θ_i = α(1-α)^i` for `i = 0..=K`, divided by their sum when
    /// `renormalize_truncation` is set.
    pub fn theta(&self) -> Vec<f64> {
        diffusion_weights(self.alpha, self.diffusion_steps, self.renormalize_truncation)
    }
}

pub fn diffusion_weights(alpha: f64, steps: usize, renormalize: bool) -> Vec<f64> {
    let raw: Vec<f64> = (0..=steps).map(|i| alpha * (1.0 - alpha).powi(i as i32)).collect();
    if renormalize {
        let total: f64 = raw.iter().sum();
        raw.iter().map(|t| t / total).collect()
    } else {
        raw
    }
}

/// Per-head query and key maps, each `(d/heads) x (d/heads)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Vec<Parameter>,
    pub w_k: Vec<Parameter>,
}

/// Tape handles for [`AttentionWeights`].
#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub w_q: Vec<Var>,
    pub w_k: Vec<Var>,
}

impl AttentionWeights {
    pub fn identity(d: usize, heads: usize) -> Self {
        let w = d / heads;
        Self::from_fn(heads, |kind, h| {
            Parameter::new(format!("attn.{kind}.{h}"), Matrix::identity(w))
        })
    }

    /// Gaussian entries with standard deviation `1/sqrt(d/heads)`.
    pub fn random(d: usize, heads: usize, rng: &mut SeededRng) -> Self {
        let w = d / heads;
        let std = 1.0 / (w as f64).sqrt();
        Self::from_fn(heads, |kind, h| {
            Parameter::new(format!("attn.{kind}.{h}"), rng.gaussian_matrix(w, w, std))
        })
    }

    fn from_fn(heads: usize, mut make: impl FnMut(&str, usize) -> Parameter) -> Self {
        let w_q = (0..heads).map(|h| make("wq", h)).collect();
        let w_k = (0..heads).map(|h| make("wk", h)).collect();
        Self { w_q, w_k }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn head_width(&self) -> usize {
        self.w_q.first().map(|p| p.value.rows()).unwrap_or(0)
    }

    /// All query maps, then all key maps.
    pub fn parameters(&self) -> Vec<&Parameter> {
        self.w_q.iter().chain(&self.w_k).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.w_q.iter_mut().chain(self.w_k.iter_mut()).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> AttentionVars {
        let w_q = self.w_q.iter().map(|p| tape.param(p)).collect();
        let w_k = self.w_k.iter().map(|p| tape.param(p)).collect();
        AttentionVars { w_q, w_k }
    }

    fn check(&self, d: usize, config: &HopDiffusionConfig) -> Result<()> {
        config.validate_width(d)?;
        let w = d / config.heads;
        if self.heads() != config.heads || self.w_k.len() != config.heads {
            return Err(Error::Dimension(format!(
                "weights hold {} heads, config asks for {}",
                self.heads(),
                config.heads
            )));
        }
        if let Some(p) = self.parameters().into_iter().find(|p| p.shape() != (w, w)) {
            return Err(Error::Dimension(format!(
                "{} has shape {:?}, expected {w}x{w}",
                p.name,
                p.shape()
            )));
        }
        Ok(())
    }
}

impl AttentionVars {
    /// Splits a flat slice laid out as [`AttentionWeights::parameters`].
    pub fn from_slice(vars: &[Var]) -> Self {
        let heads = vars.len() / 2;
        Self {
            w_q: vars[..heads].to_vec(),
            w_k: vars[heads..].to_vec(),
        }
    }
}

/// Learnable offset per hop distance, `(tau + 1) x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct HopEmbeddingTable {
    pub table: Parameter,
}

impl HopEmbeddingTable {
    pub fn zeros(tau: usize, d: usize) -> Self {
        Self {
            table: Parameter::new("hop_embedding", Matrix::zeros(tau + 1, d)),
        }
    }

    pub fn random(tau: usize, d: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self {
            table: Parameter::new("hop_embedding", rng.gaussian_matrix(tau + 1, d, std)),
        }
    }

    pub fn tau(&self) -> usize {
        self.table.value.rows() - 1
    }
}

fn check_adjacency(adjacency: &Matrix, n: usize) -> Result<()> {
    if adjacency.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "adjacency {:?} for {n} nodes",
            adjacency.shape()
        )));
    }
    for i in 0..n {
        for j in 0..n {
            let a = adjacency[(i, j)];
            if a != 0.0 && a != 1.0 {
                return Err(Error::Contract(format!("adjacency entry ({i}, {j}) = {a} is not binary")));
            }
            if a != adjacency[(j, i)] {
                return Err(Error::Contract(format!("adjacency is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

fn check_stochastic(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Dimension(format!("attention matrix {:?} is not square", a.shape())));
    }
    a.ensure_finite("attention matrix")?;
    for (r, s) in a.row_sums().into_iter().enumerate() {
        if (s - 1.0).abs() > STOCHASTIC_TOLERANCE {
            return Err(Error::Contract(format!("row {r} sums to {s}, not 1")));
        }
    }
    if a.as_slice().iter().any(|x| *x < 0.0) {
        return Err(Error::Contract("attention matrix has negative entries".into()));
    }
    Ok(())
}

/// Per-head neighbor-restricted attention on a tape; one `n x n` matrix per head.
pub fn masked_attention_on(
    tape: &mut Tape,
    h: Var,
    adjacency: &Matrix,
    weights: &AttentionVars,
    config: &HopDiffusionConfig,
) -> Result<Vec<Var>> {
    let (n, d) = tape.shape(h);
    config.validate_width(d)?;
    check_adjacency(adjacency, n)?;
    let width = d / config.heads;
    let scale = 1.0 / (width as f64).sqrt();
    let mut heads = Vec::with_capacity(config.heads);
    for head in 0..config.heads {
        let x = tape.slice_cols(h, head * width, width)?;
        let q = tape.matmul(x, weights.w_q[head])?;
        let k = tape.matmul(x, weights.w_k[head])?;
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, scale);
        let a = match config.mask_mode {
            MaskMode::LogitMask => tape.row_softmax(logits, Some(adjacency))?,
            MaskMode::Literal => {
                let dense = tape.row_softmax(logits, None)?;
                let masked = tape.mul_const(dense, adjacency)?;
                tape.row_softmax(masked, None)?
            }
        };
        heads.push(a);
    }
    Ok(heads)
}

/// `Σ_i θ_i A^i` on a tape.
pub fn diffuse_on(tape: &mut Tape, a: Var, theta: &[f64]) -> Result<Var> {
    let (n, _) = tape.shape(a);
    let eye = tape.leaf(Matrix::identity(n));
    let mut acc = tape.scale(eye, theta[0]);
    let mut power = a;
    for (i, &t) in theta.iter().enumerate().skip(1) {
        if i > 1 {
            power = tape.matmul(power, a)?;
        }
        let term = tape.scale(power, t);
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// `H + concat_h(𝒜_h H_h)` on a tape.
pub fn hop_diffused_update_on(
    tape: &mut Tape,
    h: Var,
    adjacency: &Matrix,
    weights: &AttentionVars,
    config: &HopDiffusionConfig,
) -> Result<Var> {
    let (_, d) = tape.shape(h);
    let width = d / config.heads.max(1);
    let attention = masked_attention_on(tape, h, adjacency, weights, config)?;
    let theta = config.theta();
    let mut outputs = Vec::with_capacity(attention.len());
    for (head, a) in attention.into_iter().enumerate() {
        let diffused = diffuse_on(tape, a, &theta)?;
        let x = tape.slice_cols(h, head * width, width)?;
        outputs.push(tape.matmul(diffused, x)?);
    }
    let mixed = tape.concat_cols(&outputs)?;
    tape.add(h, mixed)
}

/// `H + H_hop` where row `v` of `H_hop` is the embedding of `hops[v]`.
pub fn hop_aware_update_on(tape: &mut Tape, h: Var, hops: &[usize], table: Var) -> Result<Var> {
    let (n, d) = tape.shape(h);
    let (rows, width) = tape.shape(table);
    if hops.len() != n {
        return Err(Error::Dimension(format!("{} hop labels for {n} rows", hops.len())));
    }
    if width != d {
        return Err(Error::Dimension(format!("hop table width {width}, features {d}")));
    }
    if let Some(bad) = hops.iter().find(|&&hop| hop >= rows) {
        return Err(Error::LookupMsg(format!(
            "hop {bad} beyond table covering 0..={}",
            rows - 1
        )));
    }
    let offsets = tape.gather_rows(table, hops)?;
    tape.add(h, offsets)
}

/// Neighbor-masked attention matrices, one per head.
pub fn masked_attention(
    h: &Matrix,
    adjacency: &Matrix,
    weights: &AttentionWeights,
    config: &HopDiffusionConfig,
) -> Result<Vec<Matrix>> {
    weights.check(h.cols(), config)?;
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let vars = weights.bind(&mut tape);
    let heads = masked_attention_on(&mut tape, hv, adjacency, &vars, config)?;
    Ok(heads.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Truncated diffusion `Σ_{i=0}^{K} θ_i A^i` of a row-stochastic matrix.
pub fn diffuse_attention(a: &Matrix, config: &HopDiffusionConfig) -> Result<Matrix> {
    config.validate()?;
    check_stochastic(a)?;
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone());
    let out = diffuse_on(&mut tape, av, &config.theta())?;
    Ok(tape.value(out).clone())
}

pub fn hop_diffused_update(
    h: &Matrix,
    adjacency: &Matrix,
    weights: &AttentionWeights,
    config: &HopDiffusionConfig,
) -> Result<Matrix> {
    weights.check(h.cols(), config)?;
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let vars = weights.bind(&mut tape);
    let out = hop_diffused_update_on(&mut tape, hv, adjacency, &vars, config)?;
    Ok(tape.value(out).clone())
}

pub fn hop_aware_update(h: &Matrix, hops: &[usize], table: &HopEmbeddingTable) -> Result<Matrix> {
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let tv = tape.param(&table.table);
    let out = hop_aware_update_on(&mut tape, hv, hops, tv)?;
    Ok(tape.value(out).clone())
}

/// `α (I - (1-α) A)^{-1}`, the limit of the untruncated diffusion series.
pub fn ppr_closed_form(a: &Matrix, alpha: f64) -> Result<Matrix> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Validation(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    check_stochastic(a)?;
    let n = a.rows();
    let system = Matrix::identity(n).sub(&a.scale(1.0 - alpha))?;
    let rhs = Matrix::identity(n).scale(alpha);
    solve_linear_system(&system, &rhs)
}
