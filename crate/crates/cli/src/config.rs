use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tncm_core::experiment::{ExperimentId, ExperimentSpec};
use tncm_core::model::ModelConfig;
use tncm_core::rng;
use tncm_core::scm::LinearScmSpec;

use crate::CliError;

/// Everything a run needs. Missing keys take their defaults, unknown keys
/// are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scm: LinearScmSpec,
    pub model: ModelConfig,
    pub horizons: Vec<usize>,
    pub intervention_time: usize,
    pub n_eval_histories: usize,
    pub n_train: usize,
    pub ctf_samples: usize,
    /// Per-run seed indices; each is mixed with the master seed.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Master seed for every random stream of a command.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = ExperimentSpec::exp1();
        Self {
            scm: spec.scm,
            model: spec.model,
            horizons: spec.horizons,
            intervention_time: spec.intervention_time,
            n_eval_histories: spec.n_eval_histories,
            n_train: spec.n_train,
            ctf_samples: spec.ctf_samples,
            seeds: spec.seeds,
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scm.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.model.graph != self.scm.graph {
            return Err(CliError::Config("model.graph must equal scm.graph".into()));
        }
        Ok(())
    }

    /// The experiment for `id` with seeds mixed with the master seed.
    pub fn experiment(&self, id: ExperimentId) -> ExperimentSpec {
        let base = match id {
            ExperimentId::Exp2 => ExperimentSpec::exp2(),
            _ => ExperimentSpec::exp1(),
        };
        ExperimentSpec {
            id,
            scm: self.scm.clone(),
            horizons: self.horizons.clone(),
            intervention_time: self.intervention_time,
            n_eval_histories: self.n_eval_histories,
            n_train: self.n_train,
            ctf_samples: self.ctf_samples,
            model: self.model.clone(),
            seeds: self.seeds.iter().map(|&s| rng::derive_seed(self.seed, s)).collect(),
            query: base.query,
        }
    }
}
