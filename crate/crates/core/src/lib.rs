//! Mixture Autoencoding with a Wasserstein penalty (MAW) for robust novelty
//! detection.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: small dense matrices, Jacobi symmetric eigensolver, PSD roots.
//! - [`autodiff`]: a reverse-mode tape over the batched operations the model needs.
//! - [`nets`]: MLPs with batch norm, Glorot init, Adam / RMSprop, weight clipping.
//! - [`model`]: the dimension-reduction component, mixture posterior, losses,
//!   training loop, scoring and the ablation variants.
//! - [`theory`]: closed-form Gaussian distances and numerical oracles for the
//!   Wasserstein-vs-KL barycenter results.
//! - [`eval`]: datasets, contaminated splits, AUC / AP and experiment orchestration.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod nets;
pub mod theory;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
