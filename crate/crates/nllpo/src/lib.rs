//! Learning implicit quadratic rewards from unlabeled data.
//!
//! The crate trains stochastic models two ways — maximum likelihood and
//! entropy-regularized policy gradients under a Mahalanobis reward
//! r_U(ŷ, y) = −(ŷ−y)ᵀU(ŷ−y) — and solves for the reward matrix U itself:
//! either in closed form for linear-Gaussian data, by a covariance heuristic,
//! or with an implicit-differentiation bilevel solver driven by
//! conjugate-gradient linear solves.
//!
//! Start with the runnable examples (`cargo run --example ...`) or the
//! `nllpo` binary for the experiment drivers.

pub mod autodiff;
pub mod bilevel;
pub mod closed_form;
pub mod data;
pub mod harness;
pub mod linalg;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod rng;
