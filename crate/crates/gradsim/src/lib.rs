//! Desk-scale laboratory for gradient inversion attacks and defenses in
//! federated learning: a second-order-capable autodiff engine, a small
//! model zoo with configurable BatchNorm statistic sharing, gradient- and
//! encoding-based defenses, analytic label inference, the inversion attack
//! itself, reconstruction metrics, a recovery cost model, and executable
//! checks of the gradient-structure theory behind encoding defenses.

pub mod attack;
pub mod cost;
pub mod data_io;
pub mod defenses;
pub mod error;
pub mod graph;
pub mod harness;
pub mod label_inference;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use graph::{GradMap, Graph, NodeId};
pub use tensor::Tensor;
