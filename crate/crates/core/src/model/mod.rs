//! The causal time-series VAE.
//!
//! * One encoder per variable: a dense feature layer and a GRU over time
//!   read the variable's own value together with its parents' values and
//!   emit a diagonal Gaussian posterior at every step.
//! * One mechanism network per variable: at each step, in topological
//!   order, it maps the variable's latent, its parents' generated values,
//!   and the previous step's joint latent to the variable's value.
//!   Interventions replace a mechanism's output before anything reads it.
//! * One stack of affine couplings per time step serves as the prior over
//!   the joint latent at that step.
//!
//! Latent tensors are `[n, T, D]` with `D = n_vars * latent_dim`; variable
//! `v` owns columns `v * latent_dim .. (v + 1) * latent_dim`.

mod checkpoint;
mod config;
mod train;

pub use checkpoint::{Checkpoint, TrainingMeta, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use train::{train, train_model, EpochStats, TrainReport};

use ndarray::{s, Array2, Array3, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::nn::{
    gaussian_log_density_rows, gradient, GradStore, standard_normal_log_density_rows, Activation, AffineCoupling, Dense, Gru, Mat,
    ParamStore, Tape, Var,
};
use crate::oracle::InterventionSpec;
use crate::rng;
use crate::scm::PathBatch;

/// Rows processed per tape when running inference on large batches.
const INFERENCE_CHUNK: usize = 512;

/// Per-step diagonal Gaussian posterior, each `[n, T, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mean: Array3<f64>,
    pub log_var: Array3<f64>,
}

/// The three terms of the training objective, averaged over sequences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

#[derive(Clone, Debug)]
struct VariableEncoder {
    feature: Dense,
    gru: Gru,
    mean: Dense,
    log_var: Dense,
}

#[derive(Clone, Debug)]
struct Mechanism {
    hidden: Dense,
    out: Dense,
}

/// Tape nodes of one decoded window: `values[t][v]`, each `[n, 1]`.
pub(crate) type DecodedVars = Vec<Vec<Var>>;

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    order: Vec<usize>,
    parents: Vec<Vec<(usize, usize)>>,
    encoders: Vec<VariableEncoder>,
    mechanisms: Vec<Mechanism>,
    priors: Vec<Vec<AffineCoupling>>,
}

/// `mu + eps * exp(0.5 * log_var)`, elementwise.
pub fn reparameterize(posterior: &LatentPosterior, noise: &Array3<f64>) -> Result<Array3<f64>> {
    if noise.dim() != posterior.mean.dim() {
        return Err(Error::Shape(format!(
            "noise {:?} does not match posterior {:?}",
            noise.dim(),
            posterior.mean.dim()
        )));
    }
    let mut z = posterior.mean.clone();
    ndarray::Zip::from(&mut z)
        .and(noise)
        .and(&posterior.log_var)
        .for_each(|z, &e, &lv| *z += e * (0.5 * lv).exp());
    Ok(z)
}

impl Model {
    /// Builds a freshly initialized model; initialization depends only on
    /// the config (including its seed).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, rng::salt::MODEL);
        let mut store = ParamStore::new();
        let graph = &config.graph;
        let n = graph.len();
        let d = config.joint_latent_dim();
        let order = graph.topological_indices()?;
        let parents: Vec<Vec<(usize, usize)>> = (0..n).map(|v| graph.parent_indices(v)).collect();

        let mut encoders = Vec::with_capacity(n);
        for (v, name) in graph.variables.iter().enumerate() {
            let input = 1 + parents[v].len();
            let p = format!("encoder.{name}");
            encoders.push(VariableEncoder {
                feature: Dense::new(&mut store, &format!("{p}.feature"), input, config.encoder_width, Activation::Tanh, &mut rng)?,
                gru: Gru::new(&mut store, &format!("{p}.gru"), config.encoder_width, config.gru_hidden, &mut rng)?,
                mean: Dense::new(&mut store, &format!("{p}.mean"), config.gru_hidden, config.latent_dim, Activation::Identity, &mut rng)?,
                log_var: Dense::new(&mut store, &format!("{p}.log_var"), config.gru_hidden, config.latent_dim, Activation::Identity, &mut rng)?,
            });
        }
        let mut mechanisms = Vec::with_capacity(n);
        for (v, name) in graph.variables.iter().enumerate() {
            let input = config.latent_dim + parents[v].len() + d;
            let p = format!("decoder.{name}");
            mechanisms.push(Mechanism {
                hidden: Dense::new(&mut store, &format!("{p}.hidden"), input, config.decoder_hidden, Activation::Tanh, &mut rng)?,
                out: Dense::new(&mut store, &format!("{p}.out"), config.decoder_hidden, 1, Activation::Identity, &mut rng)?,
            });
        }
        let cond_dim = usize::from(d == 1);
        let mut priors = Vec::with_capacity(config.seq_len);
        for t in 0..config.seq_len {
            let stack = (0..config.flow_depth)
                .map(|k| {
                    AffineCoupling::new(&mut store, &format!("prior.t{t}.coupling{k}"), d, cond_dim, config.flow_hidden, k, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            priors.push(stack);
        }
        Ok(Self { config, store, order, parents, encoders, mechanisms, priors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn variables(&self) -> &[String] {
        &self.config.graph.variables
    }

    pub fn n_vars(&self) -> usize {
        self.config.graph.len()
    }

    pub fn latent_width(&self) -> usize {
        self.config.joint_latent_dim()
    }

    fn check_batch(&self, data: ArrayView3<'_, f64>, max_len: usize) -> Result<()> {
        let (n, t, v) = data.dim();
        if v != self.n_vars() {
            return Err(Error::Shape(format!("batch has {v} variables, model has {}", self.n_vars())));
        }
        if n == 0 || t == 0 || t > max_len {
            return Err(Error::Shape(format!(
                "batch shape [{n}, {t}, {v}] incompatible with window length {max_len}"
            )));
        }
        Ok(())
    }

    fn check_variables(&self, batch: &PathBatch) -> Result<()> {
        if batch.variables != self.config.graph.variables {
            return Err(Error::Shape(format!(
                "batch variables {:?} differ from model variables {:?}",
                batch.variables, self.config.graph.variables
            )));
        }
        Ok(())
    }

    /// Posterior mean and log-variance nodes per time step, each `[n, D]`.
    pub(crate) fn encode_tape(&self, tape: &mut Tape, p: &[Var], data: ArrayView3<'_, f64>) -> Vec<(Var, Var)> {
        let (n, t_len, _) = data.dim();
        let mut means: Vec<Vec<Var>> = vec![Vec::with_capacity(self.n_vars()); t_len];
        let mut log_vars: Vec<Vec<Var>> = vec![Vec::with_capacity(self.n_vars()); t_len];
        for (v, enc) in self.encoders.iter().enumerate() {
            let width = 1 + self.parents[v].len();
            let mut h = tape.constant(Mat::zeros((n, self.config.gru_hidden)));
            for t in 0..t_len {
                let mut input = Mat::zeros((n, width));
                for i in 0..n {
                    input[[i, 0]] = data[[i, t, v]];
                    for (k, &(par, lag)) in self.parents[v].iter().enumerate() {
                        input[[i, k + 1]] = match lag {
                            0 => data[[i, t, par]],
                            _ if t >= 1 => data[[i, t - 1, par]],
                            _ => 0.0,
                        };
                    }
                }
                let x = tape.constant(input);
                let feat = enc.feature.forward(tape, p, x);
                h = enc.gru.step(tape, p, h, feat);
                means[t].push(enc.mean.forward(tape, p, h));
                log_vars[t].push(enc.log_var.forward(tape, p, h));
            }
        }
        means
            .into_iter()
            .zip(log_vars)
            .map(|(m, lv)| {
                let m = if m.len() == 1 { m[0] } else { tape.concat(&m) };
                let lv = if lv.len() == 1 { lv[0] } else { tape.concat(&lv) };
                (m, lv)
            })
            .collect()
    }

    /// Recursive generation from per-step joint latents (`[n, D]` each).
    /// `pins` are `(variable, time, value)` triples.
    pub(crate) fn decode_tape(
        &self,
        tape: &mut Tape,
        p: &[Var],
        latents: &[Var],
        pins: &[(usize, usize, f64)],
        init: Option<&Array2<f64>>,
    ) -> DecodedVars {
        let n = tape.value(latents[0]).nrows();
        let nv = self.n_vars();
        let l = self.config.latent_dim;
        let init_vars: Vec<Var> = (0..nv)
            .map(|v| {
                let col = match init {
                    Some(m) if m.nrows() == 1 => Mat::from_elem((n, 1), m[[0, v]]),
                    Some(m) => m.slice(s![.., v..v + 1]).to_owned(),
                    None => Mat::zeros((n, 1)),
                };
                tape.constant(col)
            })
            .collect();
        let mut prev_latent = tape.constant(Mat::zeros((n, self.latent_width())));
        let mut values: DecodedVars = Vec::with_capacity(latents.len());
        for (t, &u_t) in latents.iter().enumerate() {
            let mut cur: Vec<Option<Var>> = vec![None; nv];
            for &v in &self.order {
                if let Some(&(_, _, c)) = pins.iter().find(|&&(pv, pt, _)| pv == v && pt == t) {
                    cur[v] = Some(tape.constant(Mat::from_elem((n, 1), c)));
                    continue;
                }
                let mut inputs = Vec::with_capacity(2 + self.parents[v].len());
                inputs.push(if self.n_vars() == 1 { u_t } else { tape.slice(u_t, v * l, (v + 1) * l) });
                for &(par, lag) in &self.parents[v] {
                    inputs.push(match lag {
                        0 => cur[par].expect("topological order"),
                        _ if t >= 1 => values[t - 1][par],
                        _ => init_vars[par],
                    });
                }
                inputs.push(prev_latent);
                let x = tape.concat(&inputs);
                let mech = &self.mechanisms[v];
                let h = mech.hidden.forward(tape, p, x);
                cur[v] = Some(mech.out.forward(tape, p, h));
            }
            values.push(cur.into_iter().map(|c| c.expect("every variable visited")).collect());
            prev_latent = u_t;
        }
        values
    }

    fn flow_cond(&self, tape: &mut Tape, n: usize) -> Option<Var> {
        (self.latent_width() == 1).then(|| tape.constant(Mat::ones((n, 1))))
    }

    /// Log-density of the time-`t` prior at `u` (`[n, D]`), as `[n, 1]`.
    pub(crate) fn prior_log_density_tape(&self, tape: &mut Tape, p: &[Var], u: Var, t: usize) -> Var {
        let n = tape.value(u).nrows();
        let cond = self.flow_cond(tape, n);
        let mut x = u;
        let mut log_dets = Vec::with_capacity(self.config.flow_depth);
        for layer in self.priors[t].iter().rev() {
            let (y, ld) = layer.inverse(tape, p, x, cond);
            x = y;
            log_dets.push(ld);
        }
        let mut total = standard_normal_log_density_rows(tape, x);
        for ld in log_dets {
            total = tape.add(total, ld);
        }
        total
    }

    /// Pushes base draws `z` (`[n, D]`) through the time-`t` prior flow.
    pub(crate) fn prior_forward_tape(&self, tape: &mut Tape, p: &[Var], z: Var, t: usize) -> Var {
        let n = tape.value(z).nrows();
        let cond = self.flow_cond(tape, n);
        let mut x = z;
        for layer in &self.priors[t] {
            x = layer.forward(tape, p, x, cond).0;
        }
        x
    }

    /// Reconstruction, KL, and total loss nodes for a batch with frozen
    /// reparameterization noise `eps` (`[n, T, D]`).
    pub(crate) fn elbo_tape(
        &self,
        tape: &mut Tape,
        p: &[Var],
        data: ArrayView3<'_, f64>,
        eps: ArrayView3<'_, f64>,
        beta: f64,
    ) -> (Var, Var, Var) {
        let (n, t_len, nv) = data.dim();
        let posterior = self.encode_tape(tape, p, data);
        let mut latents = Vec::with_capacity(t_len);
        let mut kl_terms = Vec::with_capacity(t_len);
        for (t, &(mean, log_var)) in posterior.iter().enumerate() {
            let e = tape.constant(eps.index_axis(Axis(1), t).to_owned());
            let half = tape.scale(log_var, 0.5);
            let sd = tape.exp(half);
            let scaled = tape.mul(e, sd);
            let u = tape.add(mean, scaled);
            let log_q = gaussian_log_density_rows(tape, u, mean, log_var);
            let log_p = self.prior_log_density_tape(tape, p, u, t);
            kl_terms.push(tape.sub(log_q, log_p));
            latents.push(u);
        }
        let decoded = self.decode_tape(tape, p, &latents, &[], None);
        let mut residuals = Vec::with_capacity(t_len * nv);
        for (t, row) in decoded.iter().enumerate() {
            for (v, &xhat) in row.iter().enumerate() {
                let x = tape.constant(data.slice(s![.., t, v..v + 1]).to_owned());
                let diff = tape.sub(x, xhat);
                residuals.push(tape.abs(diff));
            }
        }
        let all_res = tape.concat(&residuals);
        let rec_sum = tape.sum(all_res);
        let reconstruction = tape.scale(rec_sum, 1.0 / n as f64);
        let all_kl = tape.concat(&kl_terms);
        let kl_sum = tape.sum(all_kl);
        let kl = tape.scale(kl_sum, 1.0 / n as f64);
        let weighted = tape.scale(kl, beta);
        let total = tape.add(reconstruction, weighted);
        (total, reconstruction, kl)
    }

    /// Posterior parameters for every step of `batch` (any length up to `T`).
    pub fn encode(&self, batch: &PathBatch) -> Result<LatentPosterior> {
        self.check_variables(batch)?;
        self.check_batch(batch.values.view(), self.config.seq_len)?;
        let (n, t_len, _) = batch.values.dim();
        let d = self.latent_width();
        let mut mean = Array3::zeros((n, t_len, d));
        let mut log_var = Array3::zeros((n, t_len, d));
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(n);
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape);
            let post = self.encode_tape(&mut tape, &p, batch.values.slice(s![start..end, .., ..]));
            for (t, (m, lv)) in post.into_iter().enumerate() {
                mean.slice_mut(s![start..end, t, ..]).assign(tape.value(m));
                log_var.slice_mut(s![start..end, t, ..]).assign(tape.value(lv));
            }
        }
        Ok(LatentPosterior { mean, log_var })
    }

    fn resolve_pins(&self, interventions: &[InterventionSpec], t_len: usize) -> Result<Vec<(usize, usize, f64)>> {
        interventions
            .iter()
            .map(|iv| {
                let v = self.config.graph.index_of(&iv.variable)?;
                if iv.time_index >= t_len {
                    return Err(Error::InvalidArgument(format!(
                        "intervention time {} outside [0, {t_len})",
                        iv.time_index
                    )));
                }
                if !iv.value.is_finite() {
                    return Err(Error::NonFinite("intervention value".into()));
                }
                Ok((v, iv.time_index, iv.value))
            })
            .collect()
    }

    /// Generates paths from latents `[n, T', D]`, applying `interventions`.
    /// `init` (`[n, V]` or `[1, V]`) stands in for the values before `t = 0`
    /// and defaults to zeros.
    pub fn decode(
        &self,
        latents: &Array3<f64>,
        interventions: &[InterventionSpec],
        init: Option<&Array2<f64>>,
    ) -> Result<PathBatch> {
        let (n, t_len, d) = latents.dim();
        if d != self.latent_width() || n == 0 || t_len == 0 {
            return Err(Error::Shape(format!(
                "latents {:?} do not match joint latent width {}",
                latents.dim(),
                self.latent_width()
            )));
        }
        if let Some(m) = init {
            if m.ncols() != self.n_vars() || (m.nrows() != 1 && m.nrows() != n) {
                return Err(Error::Shape(format!("initial values {:?} incompatible", m.dim())));
            }
        }
        let pins = self.resolve_pins(interventions, t_len)?;
        let mut out = Array3::zeros((n, t_len, self.n_vars()));
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(n);
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape);
            let lat: Vec<Var> = (0..t_len)
                .map(|t| tape.constant(latents.slice(s![start..end, t, ..]).to_owned()))
                .collect();
            let chunk_init = init.map(|m| if m.nrows() == 1 { m.clone() } else { m.slice(s![start..end, ..]).to_owned() });
            let values = self.decode_tape(&mut tape, &p, &lat, &pins, chunk_init.as_ref());
            for (t, row) in values.iter().enumerate() {
                for (v, &x) in row.iter().enumerate() {
                    out.slice_mut(s![start..end, t, v]).assign(&tape.value(x).column(0));
                }
            }
        }
        PathBatch::new(out, self.variables().to_vec())
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.config.seq_len {
            return Err(Error::InvalidArgument(format!(
                "time step {t} outside [0, {})",
                self.config.seq_len
            )));
        }
        Ok(())
    }

    /// Prior log-density at time `t` for each row of `u` (`[n, D]`).
    pub fn prior_log_density(&self, u: &Array2<f64>, t: usize) -> Result<Vec<f64>> {
        self.check_step(t)?;
        if u.ncols() != self.latent_width() {
            return Err(Error::Shape(format!("latent width {} != {}", u.ncols(), self.latent_width())));
        }
        let mut out = Vec::with_capacity(u.nrows());
        for start in (0..u.nrows()).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(u.nrows());
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape);
            let x = tape.constant(u.slice(s![start..end, ..]).to_owned());
            let lp = self.prior_log_density_tape(&mut tape, &p, x, t);
            out.extend(tape.value(lp).column(0).iter().copied());
        }
        Ok(out)
    }

    /// Maps standard-normal draws `z` (`[n, D]`) to samples of the time-`t` prior.
    pub fn sample_prior(&self, z: &Array2<f64>, t: usize) -> Result<Array2<f64>> {
        self.check_step(t)?;
        if z.ncols() != self.latent_width() {
            return Err(Error::Shape(format!("latent width {} != {}", z.ncols(), self.latent_width())));
        }
        let mut out = Array2::zeros(z.dim());
        for start in (0..z.nrows()).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(z.nrows());
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape);
            let x = tape.constant(z.slice(s![start..end, ..]).to_owned());
            let y = self.prior_forward_tape(&mut tape, &p, x, t);
            out.slice_mut(s![start..end, ..]).assign(tape.value(y));
        }
        Ok(out)
    }

    /// Samples unintervened paths of length `T` from the learned priors.
    /// `z` holds standard-normal draws `[n, T, D]`.
    pub fn generate(&self, z: &Array3<f64>) -> Result<PathBatch> {
        let (n, t_len, d) = z.dim();
        if t_len > self.config.seq_len || d != self.latent_width() {
            return Err(Error::Shape(format!("base draws {:?} incompatible", z.dim())));
        }
        let mut latents = Array3::zeros((n, t_len, d));
        for t in 0..t_len {
            let u = self.sample_prior(&z.index_axis(Axis(1), t).to_owned(), t)?;
            latents.index_axis_mut(Axis(1), t).assign(&u);
        }
        self.decode(&latents, &[], None)
    }

    /// Loss terms and their gradient with respect to every parameter, on raw
    /// `[n, T, V]` data with frozen noise `eps`.
    pub fn elbo_gradient(
        &self,
        data: ArrayView3<'_, f64>,
        eps: ArrayView3<'_, f64>,
        beta: f64,
    ) -> Result<(ElboTerms, GradStore)> {
        self.check_batch(data, self.config.seq_len)?;
        let (n, t_len, _) = data.dim();
        if eps.dim() != (n, t_len, self.latent_width()) {
            return Err(Error::Shape(format!("noise {:?} does not match batch", eps.dim())));
        }
        let mut parts = (0.0, 0.0);
        let (total, grads) = gradient(&self.store, |tape, p| {
            let (total, rec, kl) = self.elbo_tape(tape, p, data, eps, beta);
            parts = (tape.scalar(rec), tape.scalar(kl));
            Ok(total)
        })?;
        let terms = ElboTerms { total, reconstruction: parts.0, kl: parts.1 };
        if !total.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!("loss terms {terms:?}")));
        }
        Ok((terms, grads))
    }

    /// Loss terms on `batch` with frozen noise `eps` (`[n, T, D]`).
    pub fn elbo_loss(&self, batch: &PathBatch, eps: &Array3<f64>, beta: f64) -> Result<ElboTerms> {
        self.check_variables(batch)?;
        self.check_batch(batch.values.view(), self.config.seq_len)?;
        let (n, t_len, _) = batch.values.dim();
        if eps.dim() != (n, t_len, self.latent_width()) {
            return Err(Error::Shape(format!("noise {:?} does not match batch", eps.dim())));
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let (total, rec, kl) = self.elbo_tape(&mut tape, &p, batch.values.view(), eps.view(), beta);
        let terms = ElboTerms { total: tape.scalar(total), reconstruction: tape.scalar(rec), kl: tape.scalar(kl) };
        if !terms.total.is_finite() {
            return Err(Error::NonFinite(format!("loss terms {terms:?}")));
        }
        Ok(terms)
    }
}
