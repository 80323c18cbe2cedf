//! Immune-style defense for message-passing graph neural networks.
//!
//! The library trains small GCN / GAT / GraphSAGE models with full-batch
//! gradient descent, watches the per-node and per-edge feature trajectories
//! they emit across epochs, and uses negative selection to turn generated
//! "feasible" trajectories into detectors for abnormal ones. Detected
//! adversarial edges are removed (or restored) and the model weights are
//! rolled back a few epochs, all without interrupting the protected
//! training run.
//!
//! Module map:
//! - [`graph`]: immutable attributed graphs, Laplacian operators and their
//!   per-edge decomposition, complementary spanning subgraphs.
//! - [`model`]: GCN / GAT / GraphSAGE-mean forward passes, analytic
//!   gradients, snapshot ring and rollback.
//! - [`trajectory`]: trajectory buffers, per-architecture edge direction
//!   vectors, normalization, MSE.
//! - [`immune`]: the defense core — feasibility bound, trajectory
//!   generator, negative selection, edge classification, rectification,
//!   and the checkpointed training pipeline.
//! - [`attack`]: poisoning attacks with ground-truth perturbation sets.
//! - [`data`]: synthetic SBM graphs, text loaders, reliable-subgraph
//!   partitioning.

pub mod attack;
pub mod data;
pub mod error;
pub mod graph;
pub mod immune;
pub mod model;
pub(crate) mod par;
pub mod trajectory;

pub use error::{Error, Result};
