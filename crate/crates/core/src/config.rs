//! TOML experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::train::TrainConfig;
use crate::agents::AgentConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::field::PhantomSpec;
use crate::fodf_ae::AeConfig;
use crate::irt::IrtConfig;
use crate::oracle::OracleConfig;
use crate::reward::RewardConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomPreset {
    Straight,
    StraightAndArc,
    Crossing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub preset: PhantomPreset,
    /// side of the cubic volume, in voxels
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            preset: PhantomPreset::StraightAndArc,
            size: 32,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSection {
    pub fn spec(&self) -> PhantomSpec {
        let mut s = match self.preset {
            PhantomPreset::Straight => PhantomSpec::straight(self.size),
            PhantomPreset::StraightAndArc => PhantomSpec::straight_and_arc(self.size),
            PhantomPreset::Crossing => PhantomSpec::crossing(self.size),
        };
        s.noise = self.noise;
        s.seed = self.seed;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub name: String,
    /// master seed, copied into every section that draws random numbers
    pub seed: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            name: "experiment".into(),
            seed: 1111,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeTraining {
    pub n_patches: usize,
    pub epochs: usize,
}

impl Default for AeTraining {
    fn default() -> Self {
        AeTraining {
            n_patches: 2000,
            epochs: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub phantom: PhantomSection,
    pub env: EnvConfig,
    pub reward: RewardConfig,
    pub agent: AgentConfig,
    pub train: TrainConfig,
    pub oracle: OracleConfig,
    pub irt: IrtConfig,
    pub ae: AeConfig,
    pub ae_training: AeTraining,
}

/// Keys whose defaults are scaled down from the published configuration,
/// with the published value.
pub const DESK_OVERRIDES: &[(&str, &str)] = &[
    ("agent.hidden", "[1024, 1024, 1024]"),
    ("agent.batch_size", "4096"),
    ("agent.buffer_capacity", "1000000"),
    ("agent.learning_starts", "4096"),
    ("irt.streamlines_per_iter", "250000"),
    ("irt.dataset_cap", "4000000"),
];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The published sizes in place of the desk-scale defaults.
    pub fn published_scale() -> Self {
        let mut c = ExperimentConfig::default();
        c.agent = c.agent.published_scale();
        c.irt = IrtConfig::published_scale();
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.reward.validate()?;
        self.agent.validate()?;
        self.oracle.validate()?;
        self.irt.validate()?;
        self.ae.validate()?;
        Ok(())
    }

    /// The Track-to-Learn ablation: no oracle bonus, four previous
    /// directions in the state, and discount 0.75.
    pub fn track_to_learn(mut self) -> Self {
        self.reward.oracle_bonus = 0.0;
        self.env.n_dirs = 4;
        self.agent.gamma = 0.75;
        self
    }

    /// Copies the master seed into every seeded section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.experiment.seed = seed;
        self.agent.seed = seed;
        self.train.seed = seed;
        self.oracle.seed = seed;
        self.irt.seed = seed;
        self.ae.seed = seed;
        self
    }

    /// Keys of `DESK_OVERRIDES` whose value differs from the published one.
    pub fn desk_overrides_in_effect(&self) -> Vec<&'static str> {
        let published = ExperimentConfig::published_scale();
        let mut out = Vec::new();
        let pairs: [(&'static str, bool); 6] = [
            ("agent.hidden", self.agent.hidden != published.agent.hidden),
            ("agent.batch_size", self.agent.batch_size != published.agent.batch_size),
            ("agent.buffer_capacity", self.agent.buffer_capacity != published.agent.buffer_capacity),
            ("agent.learning_starts", self.agent.learning_starts != published.agent.learning_starts),
            ("irt.streamlines_per_iter", self.irt.streamlines_per_iter != published.irt.streamlines_per_iter),
            ("irt.dataset_cap", self.irt.dataset_cap != published.irt.dataset_cap),
        ];
        for (k, differs) in pairs {
            if differs {
                out.push(k);
            }
        }
        out
    }
}
