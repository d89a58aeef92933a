//! Causal market simulation: linear-Gaussian SCMs, an exact counterfactual
//! oracle, and a DAG-constrained time-series VAE that answers
//! interventional threshold queries.

pub mod ctf;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod scm;

pub use error::{Error, Result};
pub use graph::{CausalGraph, Edge};
pub use model::{Checkpoint, Model, ModelConfig};
pub use oracle::{CounterfactualQuery, CtfEstimate, Direction, InterventionSpec};
pub use scm::{LinearScmSpec, NoiseBatch, PathBatch};
