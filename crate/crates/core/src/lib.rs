//! Multi-species decompositions of a target distribution π into K weighted
//! components μ_k whose coupled losses Σ p_k L(μ_k) are small while the
//! mixture Σ p_k μ_k stays close to π.
//!
//! * [`ensemble`] — particle ensembles, weights, seeding and snapshots.
//! * [`targets`] — target densities and their scores.
//! * [`kernels`] — coupled loss kernels and their Wasserstein gradients.
//! * [`density`] — KDE of the pooled mixture and KL estimators.
//! * [`wflow`] — the constrained Wasserstein flow (fixed and dynamic weights).
//! * [`euclid_ccgf`] — the Euclidean constrained flow used for validation.
//! * [`diagnostics`] — supports, structure checks, objectives and baselines.

pub mod density;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod euclid_ccgf;
pub mod kernels;
pub mod targets;
pub mod wflow;

pub use error::{DecompError, Result};

/// Library version, recorded in run metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
