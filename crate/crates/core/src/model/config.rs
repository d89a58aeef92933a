use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CausalGraph;
use crate::nn::AdamConfig;

/// Architecture and training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub graph: CausalGraph,
    /// Latent width per variable.
    pub latent_dim: usize,
    pub encoder_width: usize,
    pub gru_hidden: usize,
    pub decoder_hidden: usize,
    /// Coupling layers per time step.
    pub flow_depth: usize,
    pub flow_hidden: usize,
    /// Window length `T`.
    pub seq_len: usize,
    pub beta: f64,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            graph: CausalGraph::market_pair(),
            latent_dim: 2,
            encoder_width: 32,
            gru_hidden: 32,
            decoder_hidden: 32,
            flow_depth: 4,
            flow_hidden: 16,
            seq_len: 10,
            beta: 1.0,
            optimizer: AdamConfig::default(),
            batch_size: 128,
            epochs: 200,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.graph
            .validate()
            .map_err(|v| Error::InvalidGraph(v.to_string()))?;
        self.graph.check_supported_lags()?;
        let positive = [
            ("latent_dim", self.latent_dim),
            ("encoder_width", self.encoder_width),
            ("gru_hidden", self.gru_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("flow_depth", self.flow_depth),
            ("flow_hidden", self.flow_hidden),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
        }
        if self.seq_len < 2 {
            return Err(Error::InvalidArgument("seq_len must be at least 2".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be non-negative, got {}", self.beta)));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.epsilon > 0.0)
        {
            return Err(Error::InvalidArgument("invalid optimizer hyperparameters".into()));
        }
        Ok(())
    }

    /// Width of the joint latent vector at one time step.
    pub fn joint_latent_dim(&self) -> usize {
        self.graph.len() * self.latent_dim
    }
}
