//! Desk-scale laboratory for open-set semi-supervised learning.
//!
//! The crate bundles everything needed to train and evaluate a small
//! subspace-scored, Beta-mixture-gated semi-supervised learner on synthetic
//! open-set data:
//!
//! * [`data`] generates seeded Gaussian-cluster datasets with ID and OOD
//!   clusters, weak/strong augmentation analogues, and batch streams.
//! * [`nn`] is a small MLP (backbone `f`, classifier `g`, projection `h`) with
//!   exact reverse-mode gradients and a finite-difference checker.
//! * [`subspace`] keeps EMA class means, builds an orthonormal basis of their
//!   span, and scores features by the cosine of their angle to it.
//! * [`betamix`] fits a two-component Beta mixture to scores with the iterated
//!   method of moments, both per batch and on a full dataset.
//! * [`decide`] turns posterior ID probabilities into masks or weights.
//! * [`losses`], [`optim`] and [`eval`] provide the objective, the optimizer
//!   and the metrics; [`harness`] wires them into a training loop, sweeps,
//!   ablations and file outputs.

pub mod betamix;
pub mod data;
pub mod decide;
pub mod error;
pub mod eval;
pub mod harness;
pub mod linalg;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod subspace;

pub use error::{Error, Result};
