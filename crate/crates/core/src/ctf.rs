//! Counterfactual generation with a trained model: abduct latents from an
//! observed history, pin the intervened value, and decode forward.

use ndarray::{s, Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::oracle::{CtfEstimate, Direction, InterventionSpec};
use crate::rng;
use crate::scm::PathBatch;

pub const DEFAULT_CTF_SAMPLES: usize = 4096;

/// One counterfactual question about a single observed history. The
/// intervention acts on the last observed step; `horizon` further steps are
/// generated after it.
#[derive(Clone, Debug, PartialEq)]
pub struct CtfRequest {
    pub factual: PathBatch,
    pub intervention: InterventionSpec,
    pub horizon: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl CtfRequest {
    fn validate(&self, model: &Model) -> Result<usize> {
        if self.factual.n_sequences() != 1 {
            return Err(Error::InvalidArgument(format!(
                "factual must hold one sequence, got {}",
                self.factual.n_sequences()
            )));
        }
        if self.factual.variables != model.variables() {
            return Err(Error::Shape(format!(
                "factual variables {:?} differ from model variables {:?}",
                self.factual.variables,
                model.variables()
            )));
        }
        let v = model.config().graph.index_of(&self.intervention.variable)?;
        let observed = self.factual.len_t();
        if self.intervention.time_index + 1 != observed {
            return Err(Error::InvalidArgument(format!(
                "intervention at t={} must be the last observed step ({})",
                self.intervention.time_index,
                observed - 1
            )));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        if observed + self.horizon > model.config().seq_len {
            return Err(Error::InvalidArgument(format!(
                "history {observed} plus horizon {} exceeds the model window {}",
                self.horizon,
                model.config().seq_len
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("need at least one sample".into()));
        }
        if !self.intervention.value.is_finite() {
            return Err(Error::NonFinite("intervention value".into()));
        }
        Ok(v)
    }
}

/// Latents `[n_samples, history + horizon, D]`: posterior draws over the
/// observed steps, learned-prior draws after them. Sample `i` draws from
/// its own stream, so the first `n` samples do not depend on `n_samples`.
fn sample_latents(model: &Model, req: &CtfRequest) -> Result<Array3<f64>> {
    let post = model.encode(&req.factual)?;
    let observed = req.factual.len_t();
    let total = observed + req.horizon;
    let d = model.latent_width();
    let n = req.n_samples;
    let master = rng::derive_seed(req.seed, rng::salt::CTF);

    let mut latents = Array3::zeros((n, total, d));
    let mut base = Array3::<f64>::zeros((n, req.horizon, d));
    for i in 0..n {
        let mut r = rng::stream(master, i as u64);
        for t in 0..observed {
            for j in 0..d {
                let eps: f64 = r.sample(StandardNormal);
                let m = post.mean[[0, t, j]];
                let sd = (0.5 * post.log_var[[0, t, j]]).exp();
                latents[[i, t, j]] = m + sd * eps;
            }
        }
        for x in base.slice_mut(s![i, .., ..]).iter_mut() {
            *x = r.sample(StandardNormal);
        }
    }
    for h in 0..req.horizon {
        let u = model.sample_prior(&base.index_axis(Axis(1), h).to_owned(), observed + h)?;
        latents.index_axis_mut(Axis(1), observed + h).assign(&u);
    }
    Ok(latents)
}

/// Counterfactual continuations of the factual history under the request's
/// intervention, one sequence per sample.
pub fn counterfactual_paths(model: &Model, req: &CtfRequest) -> Result<PathBatch> {
    req.validate(model)?;
    let latents = sample_latents(model, req)?;
    model.decode(&latents, std::slice::from_ref(&req.intervention), None)
}

/// The factual-world counterpart of [`counterfactual_paths`]: the same
/// latents, with the intervened variable held at its observed value.
pub fn factual_paths(model: &Model, req: &CtfRequest) -> Result<PathBatch> {
    let v = req.validate(model)?;
    let latents = sample_latents(model, req)?;
    let observed = InterventionSpec {
        value: req.factual.values[[0, req.intervention.time_index, v]],
        ..req.intervention.clone()
    };
    model.decode(&latents, &[observed], None)
}

/// Frequency of `target` satisfying the threshold event at time `t` across
/// the sequences of `paths`.
pub fn event_frequency(
    paths: &PathBatch,
    target: usize,
    t: usize,
    threshold: f64,
    direction: Direction,
) -> Result<CtfEstimate> {
    if target >= paths.n_vars() || t >= paths.len_t() {
        return Err(Error::InvalidArgument(format!("no value for variable {target} at t={t}")));
    }
    let hits = paths
        .values
        .slice(s![.., t, target])
        .iter()
        .filter(|&&x| direction.holds(x, threshold))
        .count();
    Ok(CtfEstimate::from_counts(hits, paths.n_sequences()))
}

/// Estimates for steps `1..=req.horizon` after the intervention.
pub fn ctf_probabilities(
    model: &Model,
    req: &CtfRequest,
    target: &str,
    threshold: f64,
    direction: Direction,
) -> Result<Vec<CtfEstimate>> {
    let paths = counterfactual_paths(model, req)?;
    let target = model.config().graph.index_of(target)?;
    let t0 = req.intervention.time_index;
    (1..=req.horizon)
        .map(|k| event_frequency(&paths, target, t0 + k, threshold, direction))
        .collect()
}

/// Estimate for step `k` after the intervention.
pub fn ctf_probability(
    model: &Model,
    req: &CtfRequest,
    target: &str,
    threshold: f64,
    k: usize,
    direction: Direction,
) -> Result<CtfEstimate> {
    if k == 0 || k > req.horizon {
        return Err(Error::InvalidArgument(format!("step {k} outside 1..={}", req.horizon)));
    }
    let paths = counterfactual_paths(model, req)?;
    let target = model.config().graph.index_of(target)?;
    event_frequency(&paths, target, req.intervention.time_index + k, threshold, direction)
}
