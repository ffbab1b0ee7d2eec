//! Toy topology-classification task and its SGD training loop.
//!
//! Every instance is a small star-like graph around a target node. In class 0
//! the target is the hub and touches every other node; in class 1 the target
//! hangs off a separate hub and the remaining nodes sit two hops away. Node
//! counts and feature distributions are the same in both classes: the target
//! carries a fixed feature offset (it is the item being classified), balanced
//! by an opposite shift spread over the other nodes, plus Gaussian noise
//! everywhere. A mean-pooled readout over raw features sees the same
//! distribution in both classes; only a structure-aware update can tell them
//! apart.

use serde::{Deserialize, Serialize};

use crate::attention::{
    hop_aware_update_on, hop_diffused_update_on, AttentionVars, AttentionWeights, HopDiffusionConfig,
    HopEmbeddingTable,
};
use crate::encoders::project_on_tape;
use crate::error::{Error, Result};
use crate::graph::{induce_subgraph, Modality, MultimodalGraph, NodeId, NodeRecord, SubgraphPolicy};
use crate::numerics::{Matrix, Parameter, SeededRng, Tape, Var};
use crate::pipeline::config::{ExperimentConfig, StructureMode};

const HOP_TABLE_STD: f64 = 0.1;
/// Attention maps start small so that early attention is close to uniform
/// over neighbors.
const ATTENTION_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTaskSpec {
    /// Nodes per instance, target included.
    pub nodes: usize,
    /// Raw feature width per node.
    pub feature_dim: usize,
    /// Added to every coordinate of the target's feature; the other nodes
    /// share the opposite amount so each instance has zero feature mean.
    pub target_offset: f64,
    pub noise_std: f64,
    /// Probability of each extra edge between two non-target, non-hub nodes.
    pub extra_edge_prob: f64,
    pub train_instances: usize,
    pub test_instances: usize,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            nodes: 8,
            feature_dim: 8,
            target_offset: 5.0,
            noise_std: 1.0,
            extra_edge_prob: 0.1,
            train_instances: 200,
            test_instances: 200,
        }
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 3 {
            return Err(Error::Validation("toy instances need at least 3 nodes".into()));
        }
        if !(0.0..=1.0).contains(&self.extra_edge_prob) {
            return Err(Error::Validation("extra_edge_prob must lie in [0, 1]".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0 && self.target_offset.is_finite()) {
            return Err(Error::Validation("toy noise and offset must be finite".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Validation("toy feature_dim must be positive".into()));
        }
        if self.train_instances < 2 || self.test_instances < 2 {
            return Err(Error::Validation("toy task needs two instances per split".into()));
        }
        Ok(())
    }

    /// Keeps every node of an instance: both classes fit within two hops.
    pub fn policy(&self) -> SubgraphPolicy {
        SubgraphPolicy {
            tau: 2,
            max_nodes: self.nodes,
            keep_all_first_hop: true,
            second_hop_sample_count: self.nodes,
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTaskInstance {
    pub graph: MultimodalGraph,
    pub target: NodeId,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTaskSet {
    pub train: Vec<ToyTaskInstance>,
    pub test: Vec<ToyTaskInstance>,
}

fn toy_instance(
    spec: &ToyTaskSpec,
    feature_dim: usize,
    label: u8,
    rng: &mut SeededRng,
) -> Result<ToyTaskInstance> {
    let n = spec.nodes as NodeId;
    let target: NodeId = 0;
    let hub: NodeId = if label == 0 { target } else { 1 };
    let mut edges = Vec::new();
    if label == 1 {
        edges.push((target, hub));
    }
    let leaves: Vec<NodeId> = (1..n).filter(|&v| v != hub).collect();
    edges.extend(leaves.iter().map(|&v| (hub, v)));
    for (i, &a) in leaves.iter().enumerate() {
        for &b in &leaves[i + 1..] {
            if rng.bernoulli(spec.extra_edge_prob) {
                edges.push((a, b));
            }
        }
    }
    let nodes = (0..n)
        .map(|id| {
            let offset = if id == target {
                spec.target_offset
            } else {
                -spec.target_offset / (n - 1) as f64
            };
            let feature = (0..feature_dim)
                .map(|_| offset + spec.noise_std * rng.normal())
                .collect();
            NodeRecord {
                id,
                text: None,
                image_feature: Some(feature),
            }
        })
        .collect();
    let graph = MultimodalGraph::new(nodes, &[], &edges)?;
    Ok(ToyTaskInstance { graph, target, label })
}

fn balanced_split(
    spec: &ToyTaskSpec,
    feature_dim: usize,
    count: usize,
    rng: &mut SeededRng,
) -> Result<Vec<ToyTaskInstance>> {
    let mut labels: Vec<u8> = (0..count).map(|i| (i % 2) as u8).collect();
    rng.shuffle(&mut labels);
    labels
        .into_iter()
        .map(|label| toy_instance(spec, feature_dim, label, rng))
        .collect()
}

/// Balanced train and test splits drawn from independent streams of `seed`.
pub fn generate_toy_tasks(spec: &ToyTaskSpec, seed: u64) -> Result<ToyTaskSet> {
    spec.validate()?;
    let feature_dim = spec.feature_dim;
    let root = SeededRng::new(seed);
    Ok(ToyTaskSet {
        train: balanced_split(spec, feature_dim, spec.train_instances, &mut root.split(20))?,
        test: balanced_split(spec, feature_dim, spec.test_instances, &mut root.split(21))?,
    })
}

/// An instance reduced to what the model consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedInstance {
    pub features: Matrix,
    pub adjacency: Matrix,
    pub hops: Vec<usize>,
    pub label: f64,
}

impl PreparedInstance {
    pub fn new(instance: &ToyTaskInstance, policy: &SubgraphPolicy) -> Result<Self> {
        let sg = induce_subgraph(&instance.graph, instance.target, policy, Modality::Image)?;
        let rows = sg
            .node_ids()
            .into_iter()
            .map(|id| {
                instance.graph.node(id).map(|n| {
                    n.image_feature
                        .clone()
                        .expect("toy nodes all carry image features")
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            features: Matrix::from_rows(&rows)?,
            adjacency: sg.adjacency.clone(),
            hops: sg.hops(),
            label: f64::from(instance.label),
        })
    }
}

/// Projection, structure module and linear readout.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub mode: StructureMode,
    pub diffusion: HopDiffusionConfig,
    pub proj: Parameter,
    pub attention: AttentionWeights,
    pub hop_table: HopEmbeddingTable,
    pub readout_w: Parameter,
    pub readout_b: Parameter,
}

/// Tape handles for the trainable parameters of a [`ToyModel`].
#[derive(Clone, Debug)]
pub struct ToyVars {
    pub proj: Var,
    pub readout_w: Var,
    pub readout_b: Var,
    pub attention: Option<AttentionVars>,
    pub hop_table: Option<Var>,
}

impl ToyModel {
    pub fn new(
        mode: StructureMode,
        d_in: usize,
        d: usize,
        diffusion: HopDiffusionConfig,
        tau: usize,
        seed: u64,
    ) -> Result<Self> {
        diffusion.validate_width(d)?;
        let root = SeededRng::new(seed);
        let proj = Parameter::new(
            "proj",
            root.split(11).gaussian_matrix(d_in, d, 1.0 / (d_in as f64).sqrt()),
        );
        let mut attention = AttentionWeights::random(d, diffusion.heads, &mut root.split(12));
        for p in attention.parameters_mut() {
            p.value = p.value.scale(ATTENTION_INIT_SCALE);
        }
        let hop_table = HopEmbeddingTable::random(tau, d, HOP_TABLE_STD, &mut root.split(13));
        Ok(Self {
            mode,
            diffusion,
            proj,
            attention,
            hop_table,
            readout_w: Parameter::new("readout.w", Matrix::zeros(d, 1)),
            readout_b: Parameter::new("readout.b", Matrix::zeros(1, 1)),
        })
    }

    /// Parameters trained under the model's mode.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.proj, &self.readout_w, &self.readout_b];
        match self.mode {
            StructureMode::HopDiffused => out.extend(self.attention.parameters()),
            StructureMode::HopAware => out.push(&self.hop_table.table),
            StructureMode::None => {}
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.proj, &mut self.readout_w, &mut self.readout_b];
        match self.mode {
            StructureMode::HopDiffused => out.extend(self.attention.parameters_mut()),
            StructureMode::HopAware => out.push(&mut self.hop_table.table),
            StructureMode::None => {}
        }
        out
    }

    /// Binds `vars`, laid out as [`ToyModel::parameters`].
    pub fn vars_from_slice(&self, vars: &[Var]) -> ToyVars {
        ToyVars {
            proj: vars[0],
            readout_w: vars[1],
            readout_b: vars[2],
            attention: (self.mode == StructureMode::HopDiffused)
                .then(|| AttentionVars::from_slice(&vars[3..])),
            hop_table: (self.mode == StructureMode::HopAware).then(|| vars[3]),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> ToyVars {
        let vars: Vec<Var> = self.parameters().into_iter().map(|p| tape.param(p)).collect();
        self.vars_from_slice(&vars)
    }

    /// Readout logit for one instance.
    pub fn logit_on(&self, tape: &mut Tape, vars: &ToyVars, inst: &PreparedInstance) -> Result<Var> {
        let x = tape.leaf(inst.features.clone());
        let h = project_on_tape(tape, x, vars.proj)?;
        let h = match (self.mode, &vars.attention, vars.hop_table) {
            (StructureMode::HopDiffused, Some(att), _) => {
                hop_diffused_update_on(tape, h, &inst.adjacency, att, &self.diffusion)?
            }
            (StructureMode::HopAware, _, Some(table)) => hop_aware_update_on(tape, h, &inst.hops, table)?,
            _ => h,
        };
        let pooled = tape.mean_rows(h);
        let z = tape.matmul(pooled, vars.readout_w)?;
        tape.add(z, vars.readout_b)
    }

    pub fn loss_on(&self, tape: &mut Tape, vars: &ToyVars, inst: &PreparedInstance) -> Result<Var> {
        let z = self.logit_on(tape, vars, inst)?;
        tape.bce_with_logits(z, inst.label)
    }

    pub fn logit(&self, inst: &PreparedInstance) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let z = self.logit_on(&mut tape, &vars, inst)?;
        Ok(tape.value(z)[(0, 0)])
    }

    pub fn loss(&self, inst: &PreparedInstance) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let l = self.loss_on(&mut tape, &vars, inst)?;
        Ok(tape.value(l)[(0, 0)])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub mode: String,
    pub accuracy: f64,
    pub loss_curve: Vec<f64>,
}

impl TrainingReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// True when no epoch after `from` (1-based) raised the training loss.
    pub fn loss_non_increasing_after(&self, from: usize) -> bool {
        self.loss_curve
            .windows(2)
            .skip(from.saturating_sub(1))
            .all(|w| w[1] <= w[0])
    }
}

fn mean_loss(model: &ToyModel, data: &[PreparedInstance]) -> Result<f64> {
    let mut total = 0.0;
    for inst in data {
        total += model.loss(inst)?;
    }
    Ok(total / data.len() as f64)
}

fn accuracy(model: &ToyModel, data: &[PreparedInstance]) -> Result<f64> {
    let mut correct = 0usize;
    for inst in data {
        let predicted = if model.logit(inst)? > 0.0 { 1.0 } else { 0.0 };
        if predicted == inst.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains `config.mode` on `tasks` with minibatch SGD and reports the train
/// loss after every epoch plus held-out accuracy.
pub fn run_toy_training(config: &ExperimentConfig, tasks: &ToyTaskSet) -> Result<TrainingReport> {
    train_toy_model(config, tasks).map(|(_, report)| report)
}

/// As [`run_toy_training`], also returning the trained model.
pub fn train_toy_model(config: &ExperimentConfig, tasks: &ToyTaskSet) -> Result<(ToyModel, TrainingReport)> {
    config.validate()?;
    let train = prepare(&config.toy, &tasks.train)?;
    let test = prepare(&config.toy, &tasks.test)?;
    check_balanced(&train)?;
    check_balanced(&test)?;
    let d_in = train[0].features.cols();
    let tau = config.toy.policy().tau;
    let mut model = ToyModel::new(
        config.mode,
        d_in,
        config.dims.d,
        config.diffusion.image.clone(),
        tau,
        config.seed,
    )?;
    let lr = config.training.learning_rate;
    let batch_size = config.training.batch_size;
    let order_rng = SeededRng::new(config.seed).split(14);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.training.epochs);
    let mut step = 0usize;
    for epoch in 0..config.training.epochs {
        order_rng.split(epoch as u64).shuffle(&mut order);
        for batch in order.chunks(batch_size) {
            step += 1;
            for p in model.parameters_mut() {
                p.zero_grad();
            }
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut tape = Tape::new();
                let params: Vec<Var> = model.parameters().into_iter().map(|p| tape.param(p)).collect();
                let vars = model.vars_from_slice(&params);
                let loss = model.loss_on(&mut tape, &vars, &train[i])?;
                let value = tape.value(loss)[(0, 0)];
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "training diverged at step {step} (epoch {}): loss {value}",
                        epoch + 1
                    )));
                }
                tape.backward(loss)?;
                let grads: Vec<Matrix> = params.iter().map(|&v| tape.grad(v).scale(scale)).collect();
                for (p, g) in model.parameters_mut().into_iter().zip(&grads) {
                    p.accumulate(g)?;
                }
            }
            for p in model.parameters_mut() {
                p.sgd_step(lr);
            }
        }
        let epoch_loss = mean_loss(&model, &train)?;
        if !epoch_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at step {step} (epoch {}): loss {epoch_loss}",
                epoch + 1
            )));
        }
        loss_curve.push(epoch_loss);
    }
    let report = TrainingReport {
        mode: config.mode.name().to_string(),
        accuracy: accuracy(&model, &test)?,
        loss_curve,
    };
    Ok((model, report))
}

fn prepare(spec: &ToyTaskSpec, instances: &[ToyTaskInstance]) -> Result<Vec<PreparedInstance>> {
    let policy = spec.policy();
    instances.iter().map(|i| PreparedInstance::new(i, &policy)).collect()
}

fn check_balanced(data: &[PreparedInstance]) -> Result<()> {
    let ones = data.iter().filter(|i| i.label == 1.0).count();
    let zeros = data.len() - ones;
    if ones == 0 || zeros == 0 || ones.abs_diff(zeros) > 1 {
        return Err(Error::Contract(format!(
            "task set is unbalanced: {zeros} of class 0, {ones} of class 1"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(mode: StructureMode) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.mode = mode;
        c.training.epochs = 3;
        c.toy.train_instances = 16;
        c.toy.test_instances = 8;
        c
    }

    #[test]
    fn classes_share_node_counts_and_differ_in_hops() {
        let spec = ToyTaskSpec::default();
        let set = generate_toy_tasks(&spec, 1).unwrap();
        for inst in set.train.iter().chain(&set.test) {
            assert_eq!(inst.graph.node_count(), spec.nodes);
            let p = PreparedInstance::new(inst, &spec.policy()).unwrap();
            assert_eq!(p.hops.len(), spec.nodes);
            let far = p.hops.iter().filter(|&&h| h == 2).count();
            if inst.label == 0 {
                assert_eq!(far, 0);
            } else {
                assert_eq!(far, spec.nodes - 2);
            }
        }
        let ones = set.train.iter().filter(|i| i.label == 1).count();
        assert_eq!(ones * 2, set.train.len());
    }

    #[test]
    fn task_generation_is_deterministic() {
        let spec = ToyTaskSpec::default();
        assert_eq!(generate_toy_tasks(&spec, 9).unwrap(), generate_toy_tasks(&spec, 9).unwrap());
        assert_ne!(generate_toy_tasks(&spec, 9).unwrap(), generate_toy_tasks(&spec, 10).unwrap());
    }

    #[test]
    fn training_reports_one_loss_per_epoch() {
        for mode in StructureMode::ALL {
            let c = small_config(mode);
            let tasks = generate_toy_tasks(&c.toy, c.seed).unwrap();
            let report = run_toy_training(&c, &tasks).unwrap();
            assert_eq!(report.mode, mode.name());
            assert_eq!(report.loss_curve.len(), 3);
            assert!((0.0..=1.0).contains(&report.accuracy));
            assert_eq!(report, run_toy_training(&c, &tasks).unwrap());
        }
    }

    #[test]
    fn divergence_names_the_step() {
        let mut c = small_config(StructureMode::None);
        c.training.learning_rate = 1e300;
        c.toy.target_offset = 1e200;
        let tasks = generate_toy_tasks(&c.toy, 0).unwrap();
        match run_toy_training(&c, &tasks) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("step"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn unbalanced_sets_are_rejected() {
        let c = small_config(StructureMode::None);
        let mut tasks = generate_toy_tasks(&c.toy, 0).unwrap();
        tasks.train.retain(|i| i.label == 0);
        assert!(matches!(run_toy_training(&c, &tasks), Err(Error::Contract(_))));
    }

    #[test]
    fn report_json_shape() {
        let r = TrainingReport {
            mode: "none".into(),
            accuracy: 0.5,
            loss_curve: vec![0.7, 0.6],
        };
        assert_eq!(r.to_json(), r#"{"mode":"none","accuracy":0.5,"loss_curve":[0.7,0.6]}"#);
        assert!(r.loss_non_increasing_after(1));
    }
}
