//! Deterministic tabletop grasping harness for telling manipulation execution
//! apart from instruction grounding.
//!
//! The crate provides a kinematic multi-object picking environment, a ladder of
//! spatial randomization regimes with compositional object-region hold-outs,
//! scripted and learned policies, decomposed metrics, a trajectory dataset
//! format and a framed client-server recording protocol.

pub mod config;
pub mod dataset;
pub mod env;
pub mod error;
pub mod experiments;
pub mod imitation;
pub mod metrics;
pub mod nn;
pub mod placement;
pub mod plots;
pub mod policies;
pub mod protocol;
pub mod ppo;
pub mod recorder;
pub mod rng;
pub mod rollout;
pub mod task;

pub use config::{EnvConfig, ObjectKind, ObjectSpec, WorkspaceConfig};
pub use env::{Action7, EnvState, Instruction};
pub use error::{Error, Result};
pub use placement::{PairingSplit, Phase, Regime};
pub use task::{EpisodeSetup, TaskConfig};
