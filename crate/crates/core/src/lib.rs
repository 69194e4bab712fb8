//! Lifelong representation editing with concept-specific low-rank subspaces.
//!
//! A stream of fused feature vectors is partitioned online into concepts;
//! each concept gets a row-orthonormal basis and a gated alignment module
//! whose updates stay inside that basis. Routing mixes the modules of the
//! concepts an input resembles.

pub mod checkpoint;
pub mod dsam;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod interference;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod partition;
pub mod router;
pub mod subspace;
pub mod world;

pub use error::{DscaError, Result};
