//! Shared fixtures for the benchmarks.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tncm_core::model::{Model, ModelConfig};
use tncm_core::scm::{simulate, LinearScmSpec, PathBatch};
use tncm_core::InterventionSpec;

/// An untrained model with the default architecture.
pub fn default_model() -> Model {
    Model::new(ModelConfig::default()).expect("default config is valid")
}

/// `n` stationary paths of length 10 from the reference SCM.
pub fn market_batch(n: usize, seed: u64) -> PathBatch {
    simulate(&LinearScmSpec::market_pair(), n, 10, seed).expect("reference SCM simulates")
}

pub fn normals(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// `do(X[4] = value)`.
pub fn pin_x(value: f64) -> InterventionSpec {
    InterventionSpec { variable: "X".into(), time_index: 4, value }
}
