//! Run configuration: one TOML file with a section per pipeline.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use nwp_core::headfit::HeadFitConfig;
use nwp_core::synth::SyntheticSpec;
use nwp_core::{ModelConfig, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupportnessConfig {
    /// Size of the labeled set drawn from the training split.
    pub samples: usize,
    pub projection_dim: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub mlp_width: usize,
    /// Hidden widths for the capacity panel.
    pub widths: Vec<usize>,
    /// Train fractions for the data-size panel.
    pub fractions: Vec<f64>,
}

impl Default for SupportnessConfig {
    fn default() -> Self {
        SupportnessConfig {
            samples: 10000,
            projection_dim: 512,
            epochs: 60,
            batch: 128,
            lr: 3e-3,
            mlp_width: 64,
            widths: vec![4, 16, 64],
            fractions: vec![0.25, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub synthetic: SyntheticSpec,
    pub head_fit: HeadFitConfig,
    pub supportness: SupportnessConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// The global seed drives model init, the data split and the demo corpus.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.schedule.split.seed = seed;
        self.synthetic.seed = seed;
        self
    }
}
