//! Return disparity between paired Markov decision processes: exact tabular
//! analysis, decomposition bounds, the occupancy-measure fair LP, and a
//! double-DQN trainer with state-visitation distributional alignment.

pub mod align;
pub mod divergence;
pub mod envs;
pub mod error;
pub mod fair_lp;
pub mod linalg;
pub mod lp;
pub mod mdp;
pub mod nn;
pub mod parity;
pub mod pca;
pub mod report;

pub use error::{Error, Result};
