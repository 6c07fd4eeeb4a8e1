//! Attention-based value decomposition for cooperative multi-agent
//! Q-learning, with the baselines, environments and numerical checks
//! needed to study it at desk scale.

pub mod error;
pub mod agent;
pub mod envs;
pub mod grad;
pub mod mixers;
pub mod theory;
pub mod trainer;

pub use error::{LabError, Result};
