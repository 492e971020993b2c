//! Fine-grained causal dynamics learning at desk scale.
//!
//! A dynamics model for factored MDPs that jointly learns:
//!   * an encoder mapping each `(s, a)` sample to a latent embedding,
//!   * a discrete codebook that quantizes the state-action space into subgroups,
//!   * a graph decoder emitting one local causal graph (LCG) per code, and
//!   * per-variable prediction heads that mask out features of variables
//!     absent from the active graph.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`autodiff`])
//! over 64-bit floats, with deterministic counter-based RNG streams so that
//! runs are bit-reproducible per seed.
//!
//! The [`oracle`] module is an independent brute-force verifier: it scores
//! decompositions and graphs exactly on tiny tabular systems and checks the
//! identifiability properties that the learned pipeline only approximates.

pub mod autodiff;
pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod decoder;
pub mod dynamics;
pub mod env;
pub mod evaluation;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod planner;
pub mod rng;
pub mod trainer;

mod error;

pub use error::{Error, Result};
