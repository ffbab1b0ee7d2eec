//! Finite-difference checks for every differentiable component.
//!
//! Each case builds a small random fixture, reduces the component's output to
//! a scalar through a fixed random weighting, and compares the tape gradients
//! with central differences.

use serde::Serialize;

use crate::analysis::{gat_layer_on, GatLayerWeights};
use crate::attention::{
    diffuse_on, hop_aware_update_on, hop_diffused_update_on, masked_attention_on, AttentionVars,
    AttentionWeights, HopDiffusionConfig, HopEmbeddingTable, MaskMode,
};
use crate::encoders::project_on_tape;
use crate::error::Result;
use crate::numerics::{check_gradient, value_and_grad, GradCheckReport, Matrix, Parameter, SeededRng, Tape, Var};
use crate::pipeline::config::StructureMode;
use crate::pipeline::train::{PreparedInstance, ToyModel};
use crate::qformer::{
    cross_attention_on, ffn_on, qformer_forward_on, shared_self_attention_on, BlockOptions, BlockVars,
    QFormerBlock, QFormerConfig, QFormerStack, StackVars, BLOCK_PARAMETER_COUNT,
};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const GRADIENT_FIXTURES: usize = 3;
const PROBES: usize = 24;

pub const GRADIENT_CASES: &[&str] = &[
    "attention.masked_softmax",
    "attention.masked_softmax_literal",
    "attention.diffusion",
    "attention.hop_diffused_update",
    "attention.hop_embeddings",
    "encoders.projection",
    "qformer.self_attention",
    "qformer.cross_attention",
    "qformer.ffn",
    "qformer.forward",
    "qformer.forward_layer_norm",
    "readout.hop_diffused",
    "readout.hop_aware",
    "readout.none",
    "analysis.gat_layer",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientCase {
    pub name: String,
    pub fixture: usize,
    pub max_rel_error: f64,
    pub coordinates_checked: usize,
    pub passed: bool,
}

impl GradientCase {
    fn new(name: &str, fixture: usize, report: GradCheckReport) -> Self {
        Self {
            name: name.to_string(),
            fixture,
            max_rel_error: report.max_rel_error,
            coordinates_checked: report.coordinates_checked,
            passed: report.passes(GRADIENT_TOLERANCE),
        }
    }
}

/// Weighted sum `Σ C ⊙ out`.
fn reduce(tape: &mut Tape, out: Var, weights: &Matrix) -> Result<Var> {
    let weighted = tape.mul_const(out, weights)?;
    Ok(tape.sum_all(weighted))
}

fn random_adjacency(n: usize, p: f64, rng: &mut SeededRng) -> Matrix {
    let mut adj = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.bernoulli(p) {
                adj[(i, j)] = 1.0;
                adj[(j, i)] = 1.0;
            }
        }
    }
    adj
}

fn run<F>(params: Vec<Parameter>, rng: &mut SeededRng, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_gradient(|p| value_and_grad(p, &build), &params, rng, PROBES)
}

fn attention_case(mask_mode: MaskMode, rng: &mut SeededRng) -> Result<GradCheckReport> {
    let (n, d) = (5, 4);
    let config = HopDiffusionConfig {
        heads: 2,
        mask_mode,
        ..Default::default()
    };
    let h = rng.gaussian_matrix(n, d, 1.0);
    let adj = random_adjacency(n, 0.5, rng);
    let weights = AttentionWeights::random(d, 2, rng);
    let c = rng.gaussian_matrix(n, n, 1.0);
    let params: Vec<Parameter> = weights.parameters().into_iter().cloned().collect();
    run(params, rng, |tape, vars| {
        let hv = tape.leaf(h.clone());
        let att = masked_attention_on(tape, hv, &adj, &AttentionVars::from_slice(vars), &config)?;
        let mut total = None;
        for a in att {
            let term = reduce(tape, a, &c)?;
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
        }
        Ok(total.expect("at least one head"))
    })
}

fn diffusion_case(rng: &mut SeededRng) -> Result<GradCheckReport> {
    let n = 5;
    let raw = rng.uniform_matrix(n, n, 1.0).map(f64::abs);
    let sums = raw.row_sums();
    let a = Matrix::from_fn(n, n, |i, j| raw[(i, j)] / sums[i]);
    let theta = HopDiffusionConfig {
        diffusion_steps: 3,
        ..Default::default()
    }
    .theta();
    let c = rng.gaussian_matrix(n, n, 1.0);
    run(vec![Parameter::new("A", a)], rng, |tape, vars| {
        let out = diffuse_on(tape, vars[0], &theta)?;
        reduce(tape, out, &c)
    })
}

fn hop_diffused_case(rng: &mut SeededRng) -> Result<GradCheckReport> {
    let (n, d) = (6, 4);
    let config = HopDiffusionConfig {
        heads: 2,
        ..Default::default()
    };
    let adj = random_adjacency(n, 0.4, rng);
    let weights = AttentionWeights::random(d, 2, rng);
    let c = rng.gaussian_matrix(n, d, 1.0);
    let mut params = vec![Parameter::new("H", rng.gaussian_matrix(n, d, 1.0))];
    params.extend(weights.parameters().into_iter().cloned());
    run(params, rng, |tape, vars| {
        let out = hop_diffused_update_on(tape, vars[0], &adj, &AttentionVars::from_slice(&vars[1..]), &config)?;
        reduce(tape, out, &c)
    })
}

fn hop_embedding_case(rng: &mut SeededRng) -> Result<GradCheckReport> {
    let (n, d, tau) = (6, 3, 2);
    let h = rng.gaussian_matrix(n, d, 1.0);
    let hops: Vec<usize> = (0..n).map(|i| if i == 0 { 0 } else { 1 + rng.below(tau) }).collect();
    let table = HopEmbeddingTable::random(tau, d, 0.5, rng);
    let c = rng.gaussian_matrix(n, d, 1.0);
    run(vec![table.table], rng, |tape, vars| {
        let hv = tape.leaf(h.clone());
        let out = hop_aware_update_on(tape, hv, &hops, vars[0])?;
        let sq = tape.hadamard(out, out)?;
        reduce(tape, sq, &c)
    })
}

fn projection_case(rng: &mut SeededRng) -> Result<GradCheckReport> {
    let features = rng.gaussian_matrix(4, 5, 1.0);
    let proj = Parameter::new("proj", rng.gaussian_matrix(5, 3, 0.5));
    let c = rng.gaussian_matrix(4, 3, 1.0);
    run(vec![proj], rng, |tape, vars| {
        let f = tape.leaf(features.clone());
        let out = project_on_tape(tape, f, vars[0])?;
        let sq = tape.hadamard(out, out)?;
        reduce(tape, sq, &c)
    })
}

enum BlockPart {
    SelfAttention,
    CrossAttention,
    Ffn,
}

fn block_case(part: BlockPart, rng: &mut SeededRng) -> Result<GradCheckReport> {
    let d = 4;
    let options = BlockOptions::heads(2);
    let block = QFormerBlock::random(0, d, rng);
    let q = Parameter::new("Q", rng.gaussian_matrix(3, d, 1.0));
    let h_t = rng.gaussian_matrix(2, d, 1.0);
    let h_p = rng.gaussian_matrix(4, d, 1.0);
    let c = rng.gaussian_matrix(3, d, 1.0);
    let mut params = vec![q];
    params.extend(block.parameters().into_iter().cloned());
    run(params, rng, |tape, vars| {
        let b = BlockVars::from_slice(&vars[1..1 + BLOCK_PARAMETER_COUNT]);
        let out = match part {
            BlockPart::SelfAttention => {
                let t = tape.leaf(h_t.clone());
                shared_self_attention_on(tape, vars[0], Some(t), &b, options)?
            }
            BlockPart::CrossAttention => {
                let p = tape.leaf(h_p.clone());
                cross_attention_on(tape, vars[0], p, &b, options)?
            }
            BlockPart::Ffn => ffn_on(tape, vars[0], &b, options)?,
        };
        reduce(tape, out, &c)
    })
}

fn forward_case(layer_norm: bool, rng: &mut SeededRng) -> Result<GradCheckReport> {
    let config = QFormerConfig {
        d: 4,
        heads: 2,
        n_q: 2,
        blocks: 2,
        layer_norm,
    };
    let stack = QFormerStack::new(&config, 2, rng)?;
    let h_t = rng.gaussian_matrix(3, 4, 1.0);
    let h_p = Parameter::new("H_P", rng.gaussian_matrix(2, 4, 1.0));
    let c = rng.gaussian_matrix(stack.l_p(), 4, 1.0);
    let options = config.options();
    let mut params = vec![h_p];
    params.extend(stack.parameters().into_iter().cloned());
    run(params, rng, |tape, vars| {
        let s = StackVars::from_slice(&vars[1..]);
        let t = tape.leaf(h_t.clone());
        let out = qformer_forward_on(tape, &s, Some(t), vars[0], options)?;
        reduce(tape, out, &c)
    })
}

fn readout_case(mode: StructureMode, rng: &mut SeededRng) -> Result<GradCheckReport> {
    let n = 5;
    let config = HopDiffusionConfig {
        heads: 2,
        ..Default::default()
    };
    let mut model = ToyModel::new(mode, 3, 4, config, 2, rng.next_u64())?;
    model.readout_w.value = rng.gaussian_matrix(4, 1, 1.0);
    model.readout_b.value = rng.gaussian_matrix(1, 1, 1.0);
    let inst = PreparedInstance {
        features: rng.gaussian_matrix(n, 3, 1.0),
        adjacency: random_adjacency(n, 0.5, rng),
        hops: vec![0, 1, 1, 2, 2],
        label: if rng.bernoulli(0.5) { 1.0 } else { 0.0 },
    };
    let params: Vec<Parameter> = model.parameters().into_iter().cloned().collect();
    run(params, rng, |tape, vars| {
        let v = model.vars_from_slice(vars);
        model.loss_on(tape, &v, &inst)
    })
}

fn gat_case(rng: &mut SeededRng) -> Result<GradCheckReport> {
    let n = 5;
    let x = rng.gaussian_matrix(n, 3, 1.0);
    let adj = random_adjacency(n, 0.5, rng);
    let layer = GatLayerWeights::xavier(3, 4, rng);
    let c = rng.gaussian_matrix(n, 4, 1.0);
    let slope = layer.negative_slope;
    run(vec![layer.w, layer.a], rng, |tape, vars| {
        let xv = tape.leaf(x.clone());
        let out = gat_layer_on(tape, xv, &adj, vars[0], vars[1], slope)?;
        reduce(tape, out, &c)
    })
}

/// Runs one named case on fixture `fixture` derived from `seed`.
pub fn check_case(name: &str, fixture: usize, seed: u64) -> Result<GradientCase> {
    let index = GRADIENT_CASES
        .iter()
        .position(|c| *c == name)
        .ok_or_else(|| crate::Error::LookupMsg(format!("no gradient case named {name:?}")))?;
    let mut rng = SeededRng::new(seed).split((index * 16 + fixture) as u64);
    let report = match name {
        "attention.masked_softmax" => attention_case(MaskMode::LogitMask, &mut rng),
        "attention.masked_softmax_literal" => attention_case(MaskMode::Literal, &mut rng),
        "attention.diffusion" => diffusion_case(&mut rng),
        "attention.hop_diffused_update" => hop_diffused_case(&mut rng),
        "attention.hop_embeddings" => hop_embedding_case(&mut rng),
        "encoders.projection" => projection_case(&mut rng),
        "qformer.self_attention" => block_case(BlockPart::SelfAttention, &mut rng),
        "qformer.cross_attention" => block_case(BlockPart::CrossAttention, &mut rng),
        "qformer.ffn" => block_case(BlockPart::Ffn, &mut rng),
        "qformer.forward" => forward_case(false, &mut rng),
        "qformer.forward_layer_norm" => forward_case(true, &mut rng),
        "readout.hop_diffused" => readout_case(StructureMode::HopDiffused, &mut rng),
        "readout.hop_aware" => readout_case(StructureMode::HopAware, &mut rng),
        "readout.none" => readout_case(StructureMode::None, &mut rng),
        "analysis.gat_layer" => gat_case(&mut rng),
        _ => unreachable!("case list and dispatch agree"),
    }?;
    Ok(GradientCase::new(name, fixture, report))
}

/// Every case on [`GRADIENT_FIXTURES`] fixtures.
pub fn check_registered_gradients(seed: u64) -> Result<Vec<GradientCase>> {
    let mut out = Vec::with_capacity(GRADIENT_CASES.len() * GRADIENT_FIXTURES);
    for name in GRADIENT_CASES {
        for fixture in 0..GRADIENT_FIXTURES {
            out.push(check_case(name, fixture, seed)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        let cases = check_registered_gradients(0).unwrap();
        assert_eq!(cases.len(), GRADIENT_CASES.len() * GRADIENT_FIXTURES);
        for c in &cases {
            assert!(c.coordinates_checked > 0, "{}", c.name);
            assert!(c.passed, "{} fixture {}: {}", c.name, c.fixture, c.max_rel_error);
        }
    }

    #[test]
    fn unknown_case_is_a_lookup_error() {
        assert!(check_case("nope", 0, 0).is_err());
    }
}
