//! Structure search over compositional matrix decomposition models.
//!
//! A structure such as `M(GM'+G)+G` is an algebraic expression over
//! component priors. The crate enumerates structures with a small grammar,
//! fits each one by per-rule initialization followed by Gibbs sampling, and
//! ranks them by a stochastic lower bound on held-out predictive likelihood.

pub mod components;
pub mod diagnostics;
pub mod dims;
pub mod error;
pub mod eval;
pub mod expr;
pub mod grammar;
pub mod inference;
pub mod linalg;
pub mod rng;
pub mod scoring;
pub mod search;
pub mod sop;
pub mod synthesis;

pub use error::{Error, Result};
pub use expr::{Expr, Kind, LeafId};
pub use grammar::{Rule, Step};
