//! Covariant compositional networks (CCNs) for learning on graphs.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod graph;
pub mod harness;
pub mod layers;
pub mod model;
pub mod parallel;
pub mod perm;
pub mod scheme;
pub mod tensor;

pub use error::{CcnError, Result};
pub use graph::Graph;
pub use perm::Permutation;
pub use tensor::{ContractionSpec, DenseTensor};
