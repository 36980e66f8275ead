//! Leave-one-out distinguishability (LOOD) of Gaussian-process models.
//!
//! Given a dataset D and its counterpart D' = D ∪ S that additionally contains
//! the differing record(s) S, the posterior prediction distributions of a GP at a
//! query set Q are Gaussians whose statistical distance quantifies how much the
//! model leaks about S. This crate provides:
//!
//! * PSD linear algebra with jittered Cholesky and the closed-form block-inverse
//!   update for leave-one-out posteriors ([`linalg`]);
//! * kernel families — RBF, linear, correlation, and fully-connected NNGP with
//!   ReLU/GeLU/Tanh/Erf activations — with analytic query gradients and
//!   regularity checks ([`kernels`]);
//! * GP posteriors for both datasets at once ([`gp`]);
//! * the LOOD metrics: mean-distance, KL (base distribution = larger dataset),
//!   and the single-query variance ratio ([`metrics`]);
//! * gradient-based query optimization, stationarity and second-order
//!   verification, and perturbation scans ([`opt`]);
//! * membership-inference AUC, LOOD-vs-AUC correlation, the low-rank leakage
//!   bound, activation depth scans, and group-reconstruction studies
//!   ([`leakage`]).

pub mod error;
pub mod gp;
pub mod kernels;
pub mod leakage;
pub mod linalg;
pub mod metrics;
pub mod opt;

pub use error::{LoodError, Result};
