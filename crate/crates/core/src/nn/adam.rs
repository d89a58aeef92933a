use serde::{Deserialize, Serialize};

use super::params::{GradStore, ParamStore};
use super::tape::Mat;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam moment estimates for one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Mat>,
    pub second: Vec<Mat>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.values().iter().map(|v| Mat::zeros(v.dim())).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }

    /// Applies one bias-corrected Adam update. A gradient with any
    /// non-finite entry is rejected and leaves both the parameters and the
    /// optimizer state untouched.
    pub fn adam_step(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<()> {
        grads.check_congruent(params)?;
        if self.first.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        if let Some(i) = grads.values.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of `{}`", params.iter().nth(i).unwrap().0)));
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(&grads.values)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            });
        }
        Ok(())
    }
}
