//! Posterior inference for a fixed structure: generic Gibbs sweeps plus
//! per-rule initializers that fit each newly introduced sub-structure.

use nalgebra::DMatrix;

mod chain;
mod clusters;
mod features;
pub mod gibbs;
pub mod init;
mod low_rank;
pub mod state;

pub use gibbs::{gibbs_sweep, impute, rts_smoother};
pub use init::{fill_missing, initialize_for_rule, initialize_structure, FitConfig, Fitter, InitConfig};
pub use state::{Body, Node, State, FLOOR_PRECISION};

/// `true` where an entry is observed.
pub type Mask = DMatrix<bool>;
