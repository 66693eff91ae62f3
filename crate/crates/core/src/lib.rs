//! Oracle-guided reinforcement-learning tractography on synthetic fODF
//! phantoms.

pub mod agents;
pub mod config;
pub mod env;
pub mod error;
pub mod field;
pub mod fodf_ae;
pub mod geometry;
pub mod io;
pub mod irt;
pub mod nn;
pub mod oracle;
pub mod reward;
pub mod scoring;
pub mod synth;

pub use agents::{Agent, AgentConfig, Algorithm, ReplayBuffer};
pub use config::ExperimentConfig;
pub use env::{Env, EnvConfig, StateMode};
pub use error::{Error, Result};
pub use field::{make_phantom, Phantom, PhantomSpec};
pub use fodf_ae::{AeConfig, FodfAe};
pub use geometry::{Streamline, Vec3};
pub use io::{Channel, Tractogram};
pub use irt::IrtConfig;
pub use oracle::{LabeledSet, Oracle, OracleConfig};
pub use reward::RewardConfig;
pub use scoring::{score_tractogram, ScoreReport};
