//! Experiment configuration, read from JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::SweepSpec;
use crate::attention::HopDiffusionConfig;
use crate::error::{Error, Result};
use crate::graph::{Modality, SubgraphPolicy};
use crate::pipeline::classify::Similarity;
use crate::pipeline::synth::SyntheticGraphSpec;
use crate::pipeline::train::ToyTaskSpec;
use crate::qformer::QFormerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dims {
    /// Shared model width.
    pub d: usize,
    /// Raw image feature width before projection.
    pub d_p: usize,
    /// Query tokens per visual node.
    pub n_q: usize,
    pub heads: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            d: 64,
            d_p: 32,
            n_q: 4,
            heads: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerModality<T> {
    pub text: T,
    pub image: T,
}

impl<T> PerModality<T> {
    pub fn get(&self, modality: Modality) -> &T {
        match modality {
            Modality::Text => &self.text,
            Modality::Image => &self.image,
        }
    }

    pub fn get_mut(&mut self, modality: Modality) -> &mut T {
        match modality {
            Modality::Text => &mut self.text,
            Modality::Image => &mut self.image,
        }
    }
}

impl Default for PerModality<HopDiffusionConfig> {
    fn default() -> Self {
        Self {
            text: HopDiffusionConfig::default(),
            image: HopDiffusionConfig::default(),
        }
    }
}

impl Default for PerModality<SubgraphPolicy> {
    fn default() -> Self {
        Self {
            text: SubgraphPolicy::default(),
            image: SubgraphPolicy {
                max_nodes: 5,
                ..SubgraphPolicy::default()
            },
        }
    }
}

/// How graph structure enters the node representations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureMode {
    #[default]
    HopDiffused,
    HopAware,
    None,
}

impl StructureMode {
    pub const ALL: [StructureMode; 3] = [Self::HopDiffused, Self::HopAware, Self::None];

    pub fn name(self) -> &'static str {
        match self {
            Self::HopDiffused => "hop_diffused",
            Self::HopAware => "hop_aware",
            Self::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-2,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub graph: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dims: Dims,
    pub diffusion: PerModality<HopDiffusionConfig>,
    pub subgraph: PerModality<SubgraphPolicy>,
    pub mode: StructureMode,
    pub training: TrainingConfig,
    pub qformer_blocks: usize,
    pub layer_norm: bool,
    pub max_input_length: usize,
    pub similarity: Similarity,
    pub synthetic: SyntheticGraphSpec,
    pub energy: SweepSpec,
    pub toy: ToyTaskSpec,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: Dims::default(),
            diffusion: PerModality::default(),
            subgraph: PerModality::default(),
            mode: StructureMode::default(),
            training: TrainingConfig::default(),
            qformer_blocks: 1,
            layer_norm: false,
            max_input_length: 1024,
            similarity: Similarity::default(),
            synthetic: SyntheticGraphSpec::default(),
            energy: SweepSpec::default(),
            toy: ToyTaskSpec::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        Self::from_json(&src)
    }

    pub fn from_json(src: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(src).map_err(|e| {
            Error::Validation(format!("config line {}: {e}", e.line()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn qformer(&self) -> QFormerConfig {
        QFormerConfig {
            d: self.dims.d,
            heads: self.dims.heads,
            n_q: self.dims.n_q,
            blocks: self.qformer_blocks,
            layer_norm: self.layer_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = &self.dims;
        if dims.d == 0 || dims.d_p == 0 || dims.n_q == 0 || dims.heads == 0 {
            return Err(Error::Validation("dims must all be positive".into()));
        }
        self.qformer().validate()?;
        for modality in [Modality::Text, Modality::Image] {
            let diffusion = self.diffusion.get(modality);
            diffusion.validate_width(dims.d).map_err(|e| {
                Error::Validation(format!("diffusion.{}: {}", modality.name(), e.detail()))
            })?;
            self.subgraph.get(modality).validate().map_err(|e| {
                Error::Validation(format!("subgraph.{}: {}", modality.name(), e.detail()))
            })?;
        }
        let t = &self.training;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Validation("training epochs and batch_size must be positive".into()));
        }
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            return Err(Error::Validation(format!(
                "learning_rate must be positive, got {}",
                t.learning_rate
            )));
        }
        if self.max_input_length == 0 {
            return Err(Error::Validation("max_input_length must be positive".into()));
        }
        self.synthetic.validate()?;
        let e = &self.energy;
        if e.block_sizes.iter().sum::<usize>() == 0 || e.feature_dim == 0 || e.seeds.is_empty() {
            return Err(Error::Validation(
                "energy sweep needs nodes, a feature width and at least one seed".into(),
            ));
        }
        if !((0.0..=1.0).contains(&e.p_intra) && (0.0..=1.0).contains(&e.p_inter)) {
            return Err(Error::Validation("energy edge probabilities must lie in [0, 1]".into()));
        }
        e.diffusion.validate_width(e.feature_dim)?;
        self.toy.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_settings() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(c.max_input_length, 1024);
        assert_eq!(c.subgraph.text.max_nodes, 11);
        assert_eq!(c.subgraph.image.max_nodes, 5);
        assert_eq!(c.dims.n_q, 4);
        assert_eq!(c.diffusion.text.alpha, 0.1);
        assert_eq!(c.diffusion.image.diffusion_steps, 2);
        assert_eq!(c.dims.heads, 8);
        assert_eq!(c.qformer_blocks, 1);
        assert_eq!(c.training.learning_rate, 1e-2);
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        let partial = ExperimentConfig::from_json(r#"{"seed": 7, "mode": "hop_aware"}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.mode, StructureMode::HopAware);
        assert_eq!(partial.dims, Dims::default());
    }

    #[test]
    fn nested_invariants_are_enforced() {
        let bad_heads = r#"{"dims": {"d": 64, "heads": 5}}"#;
        assert!(matches!(ExperimentConfig::from_json(bad_heads), Err(Error::Validation(_))));
        let bad_alpha = r#"{"diffusion": {"text": {"alpha": 1.5}, "image": {}}}"#;
        assert!(matches!(ExperimentConfig::from_json(bad_alpha), Err(Error::Validation(_))));
        let bad_cap = r#"{"subgraph": {"text": {"max_nodes": 0}, "image": {}}}"#;
        assert!(ExperimentConfig::from_json(bad_cap).is_err());
        let unknown = r#"{"sed": 1}"#;
        assert!(ExperimentConfig::from_json(unknown).is_err());
        let bad_mode = r#"{"mode": "gat"}"#;
        assert!(ExperimentConfig::from_json(bad_mode).is_err());
    }

    #[test]
    fn mode_names() {
        for m in StructureMode::ALL {
            assert_eq!(StructureMode::parse(m.name()).unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
    }
}
