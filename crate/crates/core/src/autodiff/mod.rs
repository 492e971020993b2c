//! Minimal reverse-mode automatic differentiation over 2-D tensors of f64.
//!
//! A [`Graph`] is a tape: forward operations append nodes, `backward`
//! sweeps the tape in reverse creation order (which is a reverse
//! topological order by construction) and accumulates gradients
//! additively into every node that requires them.
//!
//! The engine covers exactly what the dynamics-learning stack needs:
//! dense layers, pointwise activations, column masking, categorical and
//! Gaussian negative log-likelihoods, stop-gradient, and a hard-sample
//! Bernoulli with straight-through (relaxed two-class Gumbel-Softmax)
//! gradients. No broadcasting beyond row vectors, no views, no GPU.

pub mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use graph::{Graph, NodeId};
pub use optim::{Adam, BoundParams, ParamId, ParamStore};
pub use tensor::Tensor;
