//! Evidence-subgraph explanations for node classifiers on heterogeneous
//! company graphs.
//!
//! The pipeline: a frozen relational GCN ([`target`]) is explained by a
//! learned, edge-type-aware graph generator and a layer-wise feature masker
//! ([`explainer`]). The generator is supervised by meta-path attribution
//! ([`attribution`]), which scores typed paths by how much removing them
//! increases the classifier's loss. Explanations are scored with
//! fidelity-style metrics ([`metrics`]) and, on planted-motif data
//! ([`synthbench`]), against ground truth.

pub mod attribution;
pub mod diffkernel;
pub mod error;
pub mod explainer;
pub mod fixtures;
pub mod hetgraph;
pub mod metrics;
pub mod pipeline;
pub mod synthbench;
pub mod target;
pub mod weights;

pub use error::{Error, ErrorKind, Result};
