//! Hierarchical adaptive Pólya tree (HAPT) density estimation.
//!
//! Builds Bayesian nonparametric density estimates for multiple related
//! samples on a shared recursive dyadic partition. Each sample's density is a
//! Pólya tree centered on a common random density, itself a Pólya tree, with
//! stochastically-increasing-shrinkage priors on both concentration
//! sequences. Posterior inference runs by factorized adaptive quadrature per
//! node and a hidden-Markov-tree recursion over shrinkage states, yielding
//! the exact marginal likelihood, pointwise density estimates, a cross-sample
//! dispersion function, and Dirichlet-process clustering of samples.

pub mod dispersion;
pub mod dpm;
pub mod error;
pub mod node_posterior;
pub mod partition;
pub mod quad;
pub mod simgen;
pub mod sis;
pub mod special;
pub mod tree_hmm;

pub use error::{HaptError, Result};
pub use partition::{BaseMeasure, CountTable, NodeId, PartitionTree};
pub use sis::{SisConfig, StateSupport, TransitionMatrix};
