//! Over-smoothing instrumentation: Dirichlet energy, a GAT baseline layer,
//! and the energy sweep comparing one hop-diffused update against stacked
//! GAT layers.

use serde::{Deserialize, Serialize};

use crate::attention::{hop_diffused_update, AttentionWeights, HopDiffusionConfig, MaskMode};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Parameter, SeededRng, Tape, Var};
use crate::pipeline::synth::stochastic_block_edges;

pub const GAT_NEGATIVE_SLOPE: f64 = 0.2;

/// `(1/n) Σ_i Σ_{j ∈ N(i)} ‖X_i − X_j‖²`, each undirected edge counted from
/// both ends.
pub fn dirichlet_energy(x: &Matrix, adjacency: &Matrix) -> Result<f64> {
    let n = x.rows();
    if adjacency.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "adjacency {:?} for {n} feature rows",
            adjacency.shape()
        )));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if adjacency[(i, j)] != 0.0 {
                total += x
                    .row(i)
                    .iter()
                    .zip(x.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
        }
    }
    Ok(total / n as f64)
}

/// Single-head GAT layer weights: `W` is `d x d_out`, `a` is `2·d_out x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatLayerWeights {
    pub w: Parameter,
    pub a: Parameter,
    pub negative_slope: f64,
}

impl GatLayerWeights {
    /// Xavier-uniform draws for both `W` and `a`.
    pub fn xavier(d_in: usize, d_out: usize, rng: &mut SeededRng) -> Self {
        let w_limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let a_limit = (6.0 / (2 * d_out + 1) as f64).sqrt();
        Self {
            w: Parameter::new("gat.w", rng.uniform_matrix(d_in, d_out, w_limit)),
            a: Parameter::new("gat.a", rng.uniform_matrix(2 * d_out, 1, a_limit)),
            negative_slope: GAT_NEGATIVE_SLOPE,
        }
    }
}

/// `relu(A_att X W)` where `A_att` is the softmax over neighbors (plus a
/// self-loop) of `leaky(aᵀ[W x_i ‖ W x_j])`.
pub fn gat_layer_on(
    tape: &mut Tape,
    x: Var,
    adjacency: &Matrix,
    w: Var,
    a: Var,
    negative_slope: f64,
) -> Result<Var> {
    let n = tape.shape(x).0;
    if adjacency.shape() != (n, n) {
        return Err(Error::Dimension(format!("adjacency {:?} for {n} rows", adjacency.shape())));
    }
    let d_out = tape.shape(w).1;
    if tape.shape(a) != (2 * d_out, 1) {
        return Err(Error::Dimension(format!(
            "attention vector {:?}, expected {}x1",
            tape.shape(a),
            2 * d_out
        )));
    }
    let mask = Matrix::from_fn(n, n, |i, j| if i == j || adjacency[(i, j)] != 0.0 { 1.0 } else { 0.0 });
    let z = tape.matmul(x, w)?;
    let a_src = tape.slice_rows(a, 0, d_out)?;
    let a_dst = tape.slice_rows(a, d_out, d_out)?;
    let f = tape.matmul(z, a_src)?;
    let g = tape.matmul(z, a_dst)?;
    let logits = tape.pair_sum(f, g)?;
    let logits = tape.leaky_relu(logits, negative_slope);
    let att = tape.row_softmax(logits, Some(&mask))?;
    let out = tape.matmul(att, z)?;
    Ok(tape.relu(out))
}

pub fn gat_layer(x: &Matrix, adjacency: &Matrix, weights: &GatLayerWeights) -> Result<Matrix> {
    if weights.w.value.rows() != x.cols() {
        return Err(Error::Dimension(format!(
            "features of width {} for W {:?}",
            x.cols(),
            weights.w.shape()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let w = tape.param(&weights.w);
    let a = tape.param(&weights.a);
    let out = gat_layer_on(&mut tape, xv, adjacency, w, a, weights.negative_slope)?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub k: usize,
    pub energy_hop_diffused: f64,
    pub energy_gat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub seed: u64,
    pub rows: Vec<EnergyRow>,
}

impl EnergyReport {
    pub fn row(&self, k: usize) -> Option<&EnergyRow> {
        self.rows.iter().find(|r| r.k == k)
    }
}

/// Energy profile over depths `0..=k_max` on one graph.
///
/// Depth 0 is the untouched input for both methods. At depth `k ≥ 1` the
/// hop-diffused side is a single residual update with `k` diffusion steps;
/// the GAT side is `k` stacked layers using `gat_layers[0..k]`.
pub fn energy_profile(
    x0: &Matrix,
    adjacency: &Matrix,
    k_max: usize,
    attention: &AttentionWeights,
    diffusion: &HopDiffusionConfig,
    gat_layers: &[GatLayerWeights],
) -> Result<Vec<EnergyRow>> {
    if k_max < 1 {
        return Err(Error::Validation("energy sweep needs k_max >= 1".into()));
    }
    if gat_layers.len() < k_max {
        return Err(Error::Validation(format!(
            "{} GAT layers for depth {k_max}",
            gat_layers.len()
        )));
    }
    let base = dirichlet_energy(x0, adjacency)?;
    let mut rows = vec![EnergyRow {
        k: 0,
        energy_hop_diffused: base,
        energy_gat: base,
    }];
    let mut gat_x = x0.clone();
    for k in 1..=k_max {
        let cfg = HopDiffusionConfig {
            diffusion_steps: k,
            ..diffusion.clone()
        };
        let hop_x = hop_diffused_update(x0, adjacency, attention, &cfg)?;
        gat_x = gat_layer(&gat_x, adjacency, &gat_layers[k - 1])?;
        rows.push(EnergyRow {
            k,
            energy_hop_diffused: dirichlet_energy(&hop_x, adjacency)?,
            energy_gat: dirichlet_energy(&gat_x, adjacency)?,
        });
    }
    Ok(rows)
}

/// Synthetic setup for the energy sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub block_sizes: Vec<usize>,
    pub p_intra: f64,
    pub p_inter: f64,
    pub feature_dim: usize,
    pub k_max: usize,
    pub seeds: Vec<u64>,
    pub diffusion: HopDiffusionConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            block_sizes: vec![30, 30],
            p_intra: 0.2,
            p_inter: 0.02,
            feature_dim: 16,
            k_max: 4,
            seeds: (0..10).collect(),
            diffusion: HopDiffusionConfig {
                heads: 2,
                mask_mode: MaskMode::LogitMask,
                ..Default::default()
            },
        }
    }
}

/// SBM adjacency for `seed`, as a dense symmetric 0/1 matrix.
pub fn sweep_adjacency(spec: &SweepSpec, seed: u64) -> Matrix {
    let n: usize = spec.block_sizes.iter().sum();
    let mut rng = SeededRng::new(seed).split(1);
    let mut adj = Matrix::zeros(n, n);
    for (a, b) in stochastic_block_edges(&spec.block_sizes, spec.p_intra, spec.p_inter, &mut rng) {
        adj[(a as usize, b as usize)] = 1.0;
        adj[(b as usize, a as usize)] = 1.0;
    }
    adj
}

/// Standard-normal node features for `seed`.
pub fn sweep_features(spec: &SweepSpec, seed: u64) -> Matrix {
    let n: usize = spec.block_sizes.iter().sum();
    SeededRng::new(seed).split(2).gaussian_matrix(n, spec.feature_dim, 1.0)
}

/// Runs [`energy_profile`] once per seed on a seeded SBM graph with
/// Gaussian features, untrained attention weights and Xavier GAT layers.
pub fn energy_sweep(spec: &SweepSpec) -> Result<Vec<EnergyReport>> {
    energy_sweep_with(spec, |seed| Ok(sweep_features(spec, seed)))
}

/// As [`energy_sweep`] with caller-provided initial features per seed.
pub fn energy_sweep_with(
    spec: &SweepSpec,
    features: impl Fn(u64) -> Result<Matrix>,
) -> Result<Vec<EnergyReport>> {
    spec.diffusion.validate_width(spec.feature_dim)?;
    spec.seeds
        .iter()
        .map(|&seed| {
            let adjacency = sweep_adjacency(spec, seed);
            let x0 = features(seed)?;
            let root = SeededRng::new(seed);
            let attention = AttentionWeights::random(spec.feature_dim, spec.diffusion.heads, &mut root.split(3));
            let mut gat_rng = root.split(4);
            let gat_layers: Vec<_> = (0..spec.k_max)
                .map(|_| GatLayerWeights::xavier(spec.feature_dim, spec.feature_dim, &mut gat_rng))
                .collect();
            let rows = energy_profile(&x0, &adjacency, spec.k_max, &attention, &spec.diffusion, &gat_layers)?;
            Ok(EnergyReport { seed, rows })
        })
        .collect()
}

pub const ENERGY_CSV_HEADER: &str = "seed,k,energy_hop_diffused,energy_gat";

pub fn energy_csv(reports: &[EnergyReport]) -> String {
    let mut out = String::from(ENERGY_CSV_HEADER);
    out.push('\n');
    for report in reports {
        for row in &report.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                report.seed, row.k, row.energy_hop_diffused, row.energy_gat
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> Matrix {
        Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]).unwrap()
    }

    #[test]
    fn energy_examples() {
        let pair = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(dirichlet_energy(&x, &pair).unwrap(), 1.0);
        assert_eq!(dirichlet_energy(&Matrix::filled(3, 4, 2.5), &path3()).unwrap(), 0.0);
        assert!(dirichlet_energy(&x, &path3()).is_err());
    }

    #[test]
    fn gat_zero_weight_and_single_node() {
        let mut rng = SeededRng::new(0);
        let x = rng.gaussian_matrix(3, 4, 1.0);
        let mut w = GatLayerWeights::xavier(4, 4, &mut rng);
        w.w.value = Matrix::zeros(4, 4);
        let out = gat_layer(&x, &path3(), &w).unwrap();
        assert_eq!(out, Matrix::zeros(3, 4));
        assert_eq!(dirichlet_energy(&out, &path3()).unwrap(), 0.0);

        let w = GatLayerWeights::xavier(4, 4, &mut rng);
        let single = rng.gaussian_matrix(1, 4, 1.0);
        let out = gat_layer(&single, &Matrix::zeros(1, 1), &w).unwrap();
        let want = single.matmul(&w.w.value).unwrap().map(|v| v.max(0.0));
        assert!(out.max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn depth_zero_is_input_energy_and_zero_features_stay_zero() {
        let spec = SweepSpec {
            seeds: vec![3],
            ..Default::default()
        };
        let report = &energy_sweep(&spec).unwrap()[0];
        let base = dirichlet_energy(&sweep_features(&spec, 3), &sweep_adjacency(&spec, 3)).unwrap();
        let r0 = report.row(0).unwrap();
        assert_eq!(r0.energy_hop_diffused, base);
        assert_eq!(r0.energy_gat, base);
        assert_eq!(report.rows.len(), 5);

        let n: usize = spec.block_sizes.iter().sum();
        let zero = energy_sweep_with(&spec, |_| Ok(Matrix::zeros(n, spec.feature_dim))).unwrap();
        for row in &zero[0].rows {
            assert_eq!(row.energy_hop_diffused, 0.0);
            assert_eq!(row.energy_gat, 0.0);
        }
    }

    #[test]
    fn csv_layout() {
        let reports = vec![EnergyReport {
            seed: 7,
            rows: vec![EnergyRow {
                k: 0,
                energy_hop_diffused: 1.5,
                energy_gat: 1.5,
            }],
        }];
        assert_eq!(energy_csv(&reports), "seed,k,energy_hop_diffused,energy_gat\n7,0,1.5,1.5\n");
    }
}
