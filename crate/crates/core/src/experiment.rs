//! Reproduction harness: train per seed, answer a query family on fresh
//! factual histories, and compare with the exact oracle.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ctf::{ctf_probabilities, CtfRequest, DEFAULT_CTF_SAMPLES};
use crate::error::{Error, Result};
use crate::model::{train, Checkpoint, Model, ModelConfig};
use crate::oracle::{
    ctf_belief_recursion, ctf_probabilities_mc, gaussian_threshold, CounterfactualQuery, CtfEstimate, Direction,
    InterventionSpec,
};
use crate::rng;
use crate::scm::{simulate, LinearScmSpec, PathBatch};

/// Tolerance on per-horizon L1 used by the reproduction gate.
pub const L1_TOLERANCE: f64 = 0.15;
/// Tolerance on per-horizon L1 when the model is replaced by the oracle.
pub const SELFTEST_TOLERANCE: f64 = 0.01;
/// Absolute tolerance on generated second moments.
pub const MOMENT_TOLERANCE: f64 = 0.15;

const TRADEOFF_EVAL: u64 = 0x7472_6164;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentId {
    Exp1,
    Exp2,
    Custom,
}

impl ExperimentId {
    pub fn label(self) -> &'static str {
        match self {
            ExperimentId::Exp1 => "exp1",
            ExperimentId::Exp2 => "exp2",
            ExperimentId::Custom => "custom",
        }
    }
}

/// A threshold query family: pin one variable, watch another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryTemplate {
    pub intervene: String,
    pub value: f64,
    pub target: String,
    pub threshold: f64,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub id: ExperimentId,
    pub scm: LinearScmSpec,
    pub query: QueryTemplate,
    pub horizons: Vec<usize>,
    pub intervention_time: usize,
    pub n_eval_histories: usize,
    pub n_train: usize,
    pub ctf_samples: usize,
    pub model: ModelConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self::exp1()
    }
}

impl ExperimentSpec {
    fn market_query(id: ExperimentId, value: f64, threshold: f64) -> Self {
        Self {
            id,
            scm: LinearScmSpec::market_pair(),
            query: QueryTemplate {
                intervene: "X".into(),
                value,
                target: "Y".into(),
                threshold,
                direction: Direction::Greater,
            },
            horizons: (1..=5).collect(),
            intervention_time: 4,
            n_eval_histories: 100,
            n_train: 5000,
            ctf_samples: DEFAULT_CTF_SAMPLES,
            model: ModelConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }

    /// `P(Y_{t+k} > 0 | do(X_t = 0))`.
    pub fn exp1() -> Self {
        Self::market_query(ExperimentId::Exp1, 0.0, 0.0)
    }

    /// `P(Y_{t+k} > 2 | do(X_t = -2))`.
    pub fn exp2() -> Self {
        Self::market_query(ExperimentId::Exp2, -2.0, 2.0)
    }

    pub fn max_horizon(&self) -> usize {
        self.horizons.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.scm.validate()?;
        self.model.validate()?;
        if self.model.graph != self.scm.graph {
            return Err(Error::InvalidArgument("model graph differs from the SCM graph".into()));
        }
        let vars = &self.scm.graph.variables;
        for name in [&self.query.intervene, &self.query.target] {
            if !vars.contains(name) {
                return Err(Error::UnknownVariable(name.clone()));
            }
        }
        if self.horizons.is_empty() || self.horizons[0] == 0 || self.horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "horizons {:?} must be non-empty, positive and strictly ascending",
                self.horizons
            )));
        }
        if self.intervention_time + 1 + self.max_horizon() > self.model.seq_len {
            return Err(Error::InvalidArgument(format!(
                "intervention at {} with horizon {} does not fit the window {}",
                self.intervention_time,
                self.max_horizon(),
                self.model.seq_len
            )));
        }
        if self.n_eval_histories == 0 || self.n_train == 0 || self.ctf_samples == 0 || self.seeds.is_empty() {
            return Err(Error::InvalidArgument(
                "histories, training sequences, samples and seeds must all be non-empty".into(),
            ));
        }
        if !self.query.value.is_finite() || !self.query.threshold.is_finite() {
            return Err(Error::NonFinite("query constants".into()));
        }
        Ok(())
    }

    fn intervention(&self) -> InterventionSpec {
        InterventionSpec {
            variable: self.query.intervene.clone(),
            time_index: self.intervention_time,
            value: self.query.value,
        }
    }

    fn query(&self) -> CounterfactualQuery {
        CounterfactualQuery {
            intervention: self.intervention(),
            target: self.query.target.clone(),
            threshold: self.query.threshold,
            horizon: self.max_horizon(),
            direction: self.query.direction,
        }
    }

    /// Human-readable form of the query, e.g. `P(Y[t+k] > 0 | do(X[t] = 0))`.
    pub fn describe(&self) -> String {
        let op = match self.query.direction {
            Direction::Greater => ">",
            Direction::Less => "<",
        };
        format!(
            "P({}[t+k] {op} {} | do({}[t] = {}))",
            self.query.target, self.query.threshold, self.query.intervene, self.query.value
        )
    }

    /// Training data for `seed`.
    pub fn training_data(&self, seed: u64) -> Result<PathBatch> {
        simulate(&self.scm, self.n_train, self.model.seq_len, rng::derive_seed(seed, rng::salt::TRAIN_DATA))
    }

    /// Factual histories (length `intervention_time + 1`) for `seed`.
    pub fn eval_histories(&self, seed: u64) -> Result<PathBatch> {
        simulate(
            &self.scm,
            self.n_eval_histories,
            self.intervention_time + 1,
            rng::derive_seed(seed, rng::salt::EVAL_HISTORIES),
        )
    }

    fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig { seed, ..self.model.clone() }
    }

    fn same_training(&self, other: &Self) -> bool {
        self.scm == other.scm && self.model == other.model && self.n_train == other.n_train
    }
}

/// Trains the model for one seed of `spec`.
pub fn train_for_seed(spec: &ExperimentSpec, seed: u64) -> Result<Checkpoint> {
    spec.validate()?;
    let data = spec.training_data(seed)?;
    Ok(train(&spec.model_config(seed), &data)?.0)
}

/// What answers the query in place of the oracle.
#[derive(Clone, Copy, Debug)]
pub enum Estimator<'a> {
    Model(&'a Model),
    /// Monte-Carlo simulation of the true SCM, for harness checks.
    OracleMc,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: usize,
    pub p_model: f64,
    pub p_oracle: f64,
    pub l1: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub rows: Vec<HorizonRow>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L1Report {
    pub experiment: String,
    pub description: String,
    pub rows: Vec<HorizonRow>,
    pub seeds: Vec<SeedReport>,
    pub runtime_secs: f64,
}

impl L1Report {
    pub fn mean_l1(&self) -> f64 {
        self.rows.iter().map(|r| r.l1).sum::<f64>() / self.rows.len() as f64
    }

    pub fn max_l1(&self) -> f64 {
        self.rows.iter().map(|r| r.l1).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn within(&self, tolerance: f64) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.l1 <= tolerance)
    }

    /// Aligned text table with one row per horizon.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}: {}", self.experiment, self.description);
        let _ = writeln!(out, "{:>3}  {:>9}  {:>9}  {:>7}  {:>9}", "k", "p_model", "p_oracle", "L1", "std_err");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>3}  {:>9.4}  {:>9.4}  {:>7.4}  {:>9.4}",
                r.horizon, r.p_model, r.p_oracle, r.l1, r.std_error
            );
        }
        if !self.rows.is_empty() {
            let _ = writeln!(out, "mean L1 {:.4}", self.mean_l1());
        }
        for s in self.seeds.iter().filter(|s| s.error.is_some()) {
            let _ = writeln!(out, "seed {} failed: {}", s.seed, s.error.as_deref().unwrap_or(""));
        }
        out
    }
}

/// Mean that does not depend on the order of `xs`.
fn order_free_mean(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn oracle_row(spec: &ExperimentSpec, history: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let beliefs = ctf_belief_recursion(&spec.scm, history, &spec.intervention(), spec.max_horizon())?;
    let target = spec.scm.graph.index_of(&spec.query.target)?;
    Ok(beliefs
        .iter()
        .map(|b| gaussian_threshold(b.mean[target], b.variance(target), spec.query.threshold, spec.query.direction).probability)
        .collect())
}

fn estimate_row(spec: &ExperimentSpec, est: Estimator<'_>, history: &PathBatch, seed: u64) -> Result<Vec<CtfEstimate>> {
    match est {
        Estimator::Model(model) => {
            let req = CtfRequest {
                factual: history.clone(),
                intervention: spec.intervention(),
                horizon: spec.max_horizon(),
                n_samples: spec.ctf_samples,
                seed,
            };
            ctf_probabilities(model, &req, &spec.query.target, spec.query.threshold, spec.query.direction)
        }
        Estimator::OracleMc => ctf_probabilities_mc(&spec.scm, history.sequence(0), &spec.query(), spec.ctf_samples, seed),
    }
}

/// Per-horizon comparison with the oracle on the evaluation histories of
/// `seed`.
pub fn evaluate(spec: &ExperimentSpec, est: Estimator<'_>, seed: u64) -> Result<Vec<HorizonRow>> {
    spec.validate()?;
    let histories = spec.eval_histories(seed)?;
    let ctf_master = rng::derive_seed(seed, rng::salt::CTF);
    let n = histories.n_sequences();
    let h = spec.horizons.len();
    let (mut pm, mut po, mut diffs) = (vec![vec![0.0; n]; h], vec![vec![0.0; n]; h], vec![vec![0.0; n]; h]);
    for i in 0..n {
        let history = histories.row(i, histories.len_t());
        let model = estimate_row(spec, est, &history, rng::derive_seed(ctf_master, i as u64))?;
        let oracle = oracle_row(spec, history.sequence(0))?;
        for (j, &k) in spec.horizons.iter().enumerate() {
            let (a, b) = (model[k - 1].probability, oracle[k - 1]);
            pm[j][i] = a;
            po[j][i] = b;
            diffs[j][i] = (a - b).abs();
        }
    }
    Ok(spec
        .horizons
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let l1 = order_free_mean(&mut diffs[j]);
            let var = diffs[j].iter().map(|d| (d - l1).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
            HorizonRow {
                horizon: k,
                p_model: order_free_mean(&mut pm[j]),
                p_oracle: order_free_mean(&mut po[j]),
                l1,
                std_error: (var / n as f64).sqrt(),
            }
        })
        .collect())
}

fn aggregate(spec: &ExperimentSpec, seeds: Vec<SeedReport>, started: Instant) -> L1Report {
    let ok: Vec<&SeedReport> = seeds.iter().filter(|s| s.error.is_none()).collect();
    let rows = if ok.is_empty() {
        Vec::new()
    } else {
        let m = ok.len() as f64;
        (0..spec.horizons.len())
            .map(|j| {
                let mean = |f: fn(&HorizonRow) -> f64| ok.iter().map(|s| f(&s.rows[j])).sum::<f64>() / m;
                HorizonRow {
                    horizon: spec.horizons[j],
                    p_model: mean(|r| r.p_model),
                    p_oracle: mean(|r| r.p_oracle),
                    l1: mean(|r| r.l1),
                    std_error: ok.iter().map(|s| s.rows[j].std_error.powi(2)).sum::<f64>().sqrt() / m,
                }
            })
            .collect()
    };
    L1Report {
        experiment: spec.id.label().into(),
        description: spec.describe(),
        rows,
        seeds,
        runtime_secs: started.elapsed().as_secs_f64(),
    }
}

/// Trains one model per seed and reports L1 against the oracle. A seed whose
/// training diverges is recorded and skipped.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<L1Report> {
    Ok(run_experiments(std::slice::from_ref(spec))?.remove(0))
}

/// Runs several experiments, training each distinct (SCM, model, data size,
/// seed) combination once.
pub fn run_experiments(specs: &[ExperimentSpec]) -> Result<Vec<L1Report>> {
    run_experiments_with(specs, |_, _| {})
}

/// [`run_experiments`] with a callback invoked after each training run.
pub fn run_experiments_with(
    specs: &[ExperimentSpec],
    mut on_trained: impl FnMut(u64, &Result<Checkpoint>),
) -> Result<Vec<L1Report>> {
    for s in specs {
        s.validate()?;
    }
    let started = Instant::now();
    let mut per_spec: Vec<Vec<SeedReport>> = vec![Vec::new(); specs.len()];
    let mut done = vec![vec![false; 0]; specs.len()];
    for (i, s) in specs.iter().enumerate() {
        done[i] = vec![false; s.seeds.len()];
    }
    for i in 0..specs.len() {
        for (si, &seed) in specs[i].seeds.iter().enumerate() {
            if done[i][si] {
                continue;
            }
            let trained = train_for_seed(&specs[i], seed);
            on_trained(seed, &trained);
            for j in i..specs.len() {
                let Some(sj) = specs[j].seeds.iter().position(|&x| x == seed) else { continue };
                if done[j][sj] || !specs[j].same_training(&specs[i]) {
                    continue;
                }
                let report = match &trained {
                    Ok(ck) => match evaluate(&specs[j], Estimator::Model(&ck.model), seed) {
                        Ok(rows) => SeedReport { seed, rows, error: None },
                        Err(e) => SeedReport { seed, rows: Vec::new(), error: Some(e.to_string()) },
                    },
                    Err(e) => SeedReport { seed, rows: Vec::new(), error: Some(e.to_string()) },
                };
                per_spec[j].push(report);
                done[j][sj] = true;
            }
        }
    }
    Ok(specs
        .iter()
        .zip(per_spec)
        .map(|(s, mut seeds)| {
            seeds.sort_by_key(|r| s.seeds.iter().position(|&x| x == r.seed));
            aggregate(s, seeds, started)
        })
        .collect())
}

/// Runs the harness with the Monte-Carlo oracle in place of the model.
pub fn run_oracle_selftest(spec: &ExperimentSpec) -> Result<L1Report> {
    spec.validate()?;
    let started = Instant::now();
    let seeds = spec
        .seeds
        .iter()
        .map(|&seed| Ok(SeedReport { seed, rows: evaluate(spec, Estimator::OracleMc, seed)?, error: None }))
        .collect::<Result<Vec<_>>>()?;
    let mut report = aggregate(spec, seeds, started);
    report.experiment = format!("{}-selftest", spec.id.label());
    Ok(report)
}

/// Evaluates an untrained (randomly initialised) model on the first seed.
pub fn run_untrained_control(spec: &ExperimentSpec) -> Result<L1Report> {
    spec.validate()?;
    let started = Instant::now();
    let seed = spec.seeds[0];
    let model = Model::new(spec.model_config(seed))?;
    let rows = evaluate(spec, Estimator::Model(&model), seed)?;
    let mut report = aggregate(spec, vec![SeedReport { seed, rows, error: None }], started);
    report.experiment = format!("{}-untrained", spec.id.label());
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub beta: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub l1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffReport {
    pub horizons: Vec<usize>,
    pub rows: Vec<TradeoffRow>,
}

impl TradeoffReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:>6}  {:>9}  {:>9}", "beta", "recon", "kl");
        for k in &self.horizons {
            let _ = write!(out, "  {:>6}", format!("L1@{k}"));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:>6}  {:>9.4}  {:>9.4}", r.beta, r.reconstruction, r.kl);
            for l in &r.l1 {
                let _ = write!(out, "  {l:>6.4}");
            }
            out.push('\n');
        }
        out
    }
}

pub const TRADEOFF_BETAS: [f64; 3] = [0.0, 1.0, 10.0];

/// Trains one model per β on the first seed and reports held-out
/// reconstruction and KL next to per-horizon L1.
pub fn tradeoff_report(spec: &ExperimentSpec, betas: &[f64]) -> Result<TradeoffReport> {
    spec.validate()?;
    let seed = spec.seeds[0];
    let data = spec.training_data(seed)?;
    let held_out = simulate(&spec.scm, spec.n_eval_histories.max(256), spec.model.seq_len, rng::derive_seed(seed, TRADEOFF_EVAL))?;
    let mut r = rng::stream(seed, TRADEOFF_EVAL);
    let d = spec.model.joint_latent_dim();
    let eps = Array3::from_shape_simple_fn((held_out.n_sequences(), spec.model.seq_len, d), || r.sample(StandardNormal));
    let rows = betas
        .iter()
        .map(|&beta| {
            let config = ModelConfig { beta, ..spec.model_config(seed) };
            let (ck, _) = train(&config, &data)?;
            let terms = ck.model.elbo_loss(&held_out, &eps, beta)?;
            let rows = evaluate(spec, Estimator::Model(&ck.model), seed)?;
            Ok(TradeoffRow {
                beta,
                reconstruction: terms.reconstruction,
                kl: terms.kl,
                l1: rows.iter().map(|r| r.l1).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TradeoffReport { horizons: spec.horizons.clone(), rows })
}

pub const CURVES_HEADER: [&str; 6] = ["experiment", "horizon", "p_model", "p_oracle", "l1", "std_error"];

/// Writes `<experiment>_curves.csv` and `<experiment>_curves.svg` into `dir`
/// and returns their paths.
pub fn export_curves(report: &L1Report, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{}_curves.csv", report.experiment));
    let svg_path = dir.join(format!("{}_curves.svg", report.experiment));
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(CURVES_HEADER)?;
    for r in &report.rows {
        w.write_record([
            report.experiment.clone(),
            r.horizon.to_string(),
            r.p_model.to_string(),
            r.p_oracle.to_string(),
            r.l1.to_string(),
            r.std_error.to_string(),
        ])?;
    }
    w.flush()?;
    fs::write(&svg_path, curves_svg(report))?;
    Ok((csv_path, svg_path))
}

/// Parses a curves CSV back into `(experiment, rows)`.
pub fn read_curves(path: impl AsRef<Path>) -> Result<(String, Vec<HorizonRow>)> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(CURVES_HEADER) {
        return Err(Error::Csv(format!("unexpected curves header {:?}", r.headers()?)));
    }
    let mut name = String::new();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::Csv(format!("bad number `{}`", &rec[i])))
        };
        name = rec[0].to_string();
        rows.push(HorizonRow {
            horizon: rec[1].parse().map_err(|_| Error::Csv(format!("bad horizon `{}`", &rec[1])))?,
            p_model: num(2)?,
            p_oracle: num(3)?,
            l1: num(4)?,
            std_error: num(5)?,
        });
    }
    Ok((name, rows))
}

fn curves_svg(report: &L1Report) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let k_max = report.rows.iter().map(|r| r.horizon).max().unwrap_or(1).max(2) as f64;
    let k_min = report.rows.iter().map(|r| r.horizon).min().unwrap_or(1) as f64;
    let x = |k: usize| pad + (k as f64 - k_min) / (k_max - k_min).max(1.0) * (w - 2.0 * pad);
    let y = |p: f64| h - pad - p.clamp(0.0, 1.0) * (h - 2.0 * pad);
    let points = |f: fn(&HorizonRow) -> f64| {
        report
            .rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", x(r.horizon), y(f(r))))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        w / 2.0,
        escape(&report.description)
    );
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black"><line x1="{pad}" y1="{}" x2="{}" y2="{}"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}"/></g>"#,
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    for r in &report.rows {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="11">{}</text>"#,
            x(r.horizon),
            h - pad + 16.0,
            r.horizon
        );
    }
    for p in [0.0, 0.5, 1.0] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end" font-size="11">{p:.1}</text>"#, pad - 6.0, y(p) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">horizon k</text>"#, w / 2.0, h - 8.0);
    let _ = writeln!(
        s,
        r##"<polyline class="p_model" fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##,
        points(|r| r.p_model)
    );
    let _ = writeln!(
        s,
        r##"<polyline class="p_oracle" fill="none" stroke="#d62728" stroke-width="2" stroke-dasharray="6 3" points="{}"/>"##,
        points(|r| r.p_oracle)
    );
    let lx = w - pad - 110.0;
    let _ = writeln!(
        s,
        r##"<g class="legend" font-size="11"><line x1="{lx}" y1="{pad}" x2="{}" y2="{pad}" stroke="#1f77b4" stroke-width="2"/><text x="{}" y="{}">model</text><line x1="{lx}" y1="{}" x2="{}" y2="{}" stroke="#d62728" stroke-width="2" stroke-dasharray="6 3"/><text x="{}" y="{}">oracle</text></g>"##,
        lx + 24.0,
        lx + 30.0,
        pad + 4.0,
        pad + 16.0,
        lx + 24.0,
        pad + 16.0,
        lx + 30.0,
        pad + 20.0
    );
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Pooled moments of a batch of paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// `lag1[i][j] = E[x_i(t-1) x_j(t)]`.
    pub lag1: Vec<Vec<f64>>,
}

impl Moments {
    /// Means and variances pool every step; lagged products pool every
    /// consecutive pair of steps.
    pub fn of(paths: &PathBatch) -> Result<Self> {
        let (n, t_len, v) = paths.values.dim();
        if t_len < 2 {
            return Err(Error::InvalidArgument("moments need at least two steps".into()));
        }
        let count = (n * t_len) as f64;
        let mut mean = vec![0.0; v];
        let mut variance = vec![0.0; v];
        for j in 0..v {
            let col = paths.values.index_axis(ndarray::Axis(2), j);
            mean[j] = col.sum() / count;
            variance[j] = col.iter().map(|x| (x - mean[j]).powi(2)).sum::<f64>() / count;
        }
        let pairs = (n * (t_len - 1)) as f64;
        let mut lag1 = vec![vec![0.0; v]; v];
        for seq in paths.values.outer_iter() {
            for t in 1..t_len {
                for i in 0..v {
                    for j in 0..v {
                        lag1[i][j] += seq[[t - 1, i]] * seq[[t, j]];
                    }
                }
            }
        }
        lag1.iter_mut().flatten().for_each(|x| *x /= pairs);
        Ok(Self { mean, variance, lag1 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub variables: Vec<String>,
    pub generated: Moments,
    pub reference: Moments,
    pub tolerance: f64,
}

impl MomentReport {
    pub fn compare(variables: Vec<String>, generated: Moments, reference: Moments, tolerance: f64) -> Self {
        Self { variables, generated, reference, tolerance }
    }

    pub fn mean_deviation(&self, v: usize) -> f64 {
        (self.generated.mean[v] - self.reference.mean[v]).abs()
    }

    pub fn variance_deviation(&self, v: usize) -> f64 {
        (self.generated.variance[v] - self.reference.variance[v]).abs()
    }

    pub fn lag1_deviation(&self, i: usize, j: usize) -> f64 {
        (self.generated.lag1[i][j] - self.reference.lag1[i][j]).abs()
    }

    /// True when every mean, variance and lagged product is within tolerance.
    pub fn passed(&self) -> bool {
        let v = self.variables.len();
        (0..v).all(|i| {
            self.mean_deviation(i) <= self.tolerance
                && self.variance_deviation(i) <= self.tolerance
                && (0..v).all(|j| self.lag1_deviation(i, j) <= self.tolerance)
        })
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16}  {:>9}  {:>9}  {:>9}", "moment", "model", "scm", "|diff|");
        let mut line = |name: String, a: f64, b: f64| {
            let _ = writeln!(out, "{name:<16}  {a:>9.4}  {b:>9.4}  {:>9.4}", (a - b).abs());
        };
        let vars = &self.variables;
        for (i, v) in vars.iter().enumerate() {
            line(format!("E[{v}]"), self.generated.mean[i], self.reference.mean[i]);
            line(format!("Var[{v}]"), self.generated.variance[i], self.reference.variance[i]);
        }
        for (i, a) in vars.iter().enumerate() {
            for (j, b) in vars.iter().enumerate() {
                line(format!("E[{a}(t-1){b}(t)]"), self.generated.lag1[i][j], self.reference.lag1[i][j]);
            }
        }
        let _ = writeln!(out, "{}", if self.passed() { "fit: pass" } else { "fit: FAIL" });
        out
    }
}

const FIT_STREAM: u64 = 0x6669_7400;

/// Compares `n` unintervened sequences generated by `model` with `n`
/// stationary sequences simulated from `scm`.
pub fn observational_fit(model: &Model, scm: &LinearScmSpec, n: usize, seed: u64) -> Result<MomentReport> {
    if model.config().graph != scm.graph {
        return Err(Error::InvalidArgument("model graph differs from the SCM graph".into()));
    }
    let t_len = model.config().seq_len;
    let mut r = rng::stream(seed, FIT_STREAM);
    let z = Array3::from_shape_simple_fn((n, t_len, model.latent_width()), || r.sample(StandardNormal));
    let generated = Moments::of(&model.generate(&z)?)?;
    let reference = Moments::of(&simulate(scm, n, t_len, rng::derive_seed(seed, FIT_STREAM))?)?;
    Ok(MomentReport::compare(scm.graph.variables.clone(), generated, reference, MOMENT_TOLERANCE))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(id: ExperimentId) -> ExperimentSpec {
        let base = match id {
            ExperimentId::Exp2 => ExperimentSpec::exp2(),
            _ => ExperimentSpec::exp1(),
        };
        ExperimentSpec {
            n_eval_histories: 6,
            n_train: 24,
            ctf_samples: 128,
            seeds: vec![7, 8],
            model: ModelConfig {
                encoder_width: 4,
                gru_hidden: 4,
                decoder_hidden: 4,
                flow_hidden: 3,
                flow_depth: 2,
                batch_size: 12,
                epochs: 1,
                ..ModelConfig::default()
            },
            ..base
        }
    }

    #[test]
    fn validation() {
        assert!(ExperimentSpec::exp1().validate().is_ok());
        let mut s = ExperimentSpec::exp2();
        s.horizons = vec![2, 1];
        assert!(s.validate().is_err());
        s.horizons = vec![1, 6];
        assert!(s.validate().is_err());
        s.horizons = vec![];
        assert!(s.validate().is_err());
        let mut s = ExperimentSpec::exp1();
        s.query.target = "Z".into();
        assert!(s.validate().is_err());
        let mut s = ExperimentSpec::exp1();
        s.n_eval_histories = 0;
        assert!(s.validate().is_err());
        assert_eq!(ExperimentSpec::exp2().describe(), "P(Y[t+k] > 2 | do(X[t] = -2))");
    }

    #[test]
    fn spec_json_round_trip_and_strictness() {
        let s = ExperimentSpec::exp2();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentSpec>(&text).unwrap(), s);
        assert!(serde_json::from_str::<ExperimentSpec>(r#"{"bogus": 1}"#).is_err());
        let partial: ExperimentSpec = serde_json::from_str(r#"{"n_eval_histories": 3}"#).unwrap();
        assert_eq!(partial.n_eval_histories, 3);
        assert_eq!(partial.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn order_free_mean_is_permutation_invariant() {
        let mut a = vec![0.1, 1e-17, 0.7, 0.3, 1e-9];
        let mut b = vec![1e-9, 0.3, 0.1, 0.7, 1e-17];
        assert_eq!(order_free_mean(&mut a).to_bits(), order_free_mean(&mut b).to_bits());
    }

    #[test]
    fn selftest_rows_are_small_and_deterministic() {
        let spec = ExperimentSpec { ctf_samples: 20_000, ..tiny(ExperimentId::Exp1) };
        let a = run_oracle_selftest(&spec).unwrap();
        assert_eq!(a.rows.len(), 5);
        assert!(a.within(0.02), "{}", a.table());
        let b = run_oracle_selftest(&spec).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.experiment, "exp1-selftest");
    }

    #[test]
    fn shared_training_matches_separate_runs() {
        let (s1, s2) = (tiny(ExperimentId::Exp1), tiny(ExperimentId::Exp2));
        let both = run_experiments(&[s1.clone(), s2.clone()]).unwrap();
        let mut trained = 0;
        run_experiments_with(&[s1.clone(), s2.clone()], |_, _| trained += 1).unwrap();
        assert_eq!(trained, 2);
        assert_eq!(both[0].rows, run_experiment(&s1).unwrap().rows);
        assert_eq!(both[1].rows, run_experiment(&s2).unwrap().rows);
        assert_eq!(both[1].seeds.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![7, 8]);
        for r in &both[0].rows {
            assert!((0.0..=1.0).contains(&r.l1));
        }
    }

    #[test]
    fn diverging_seed_is_reported_and_skipped() {
        let mut spec = tiny(ExperimentId::Exp1);
        spec.model.optimizer.learning_rate = 1e300;
        spec.model.epochs = 3;
        let report = run_experiment(&spec).unwrap();
        assert!(report.seeds.iter().all(|s| s.error.is_some()), "{report:?}");
        assert!(report.rows.is_empty());
        assert!(!report.within(1.0));
    }

    #[test]
    fn curves_round_trip() {
        let report = L1Report {
            experiment: "exp1".into(),
            description: ExperimentSpec::exp1().describe(),
            rows: (1..=5)
                .map(|k| HorizonRow {
                    horizon: k,
                    p_model: 1.0 / (k as f64 + 2.0),
                    p_oracle: 0.1 * k as f64,
                    l1: std::f64::consts::PI / (10.0 * k as f64),
                    std_error: 1e-3 / 3.0,
                })
                .collect(),
            seeds: Vec::new(),
            runtime_secs: 1.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let (csv_path, svg_path) = export_curves(&report, dir.path()).unwrap();
        let (name, rows) = read_curves(&csv_path).unwrap();
        assert_eq!(name, "exp1");
        assert_eq!(rows, report.rows);
        let text = fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert_eq!(text.lines().next().unwrap(), "experiment,horizon,p_model,p_oracle,l1,std_error");
        let svg = fs::read_to_string(svg_path).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("class=\"legend\"") && svg.contains(">model<") && svg.contains(">oracle<"));
        assert!(svg.contains("&gt;"));
    }

    #[test]
    fn scm_fits_itself() {
        let spec = LinearScmSpec::market_pair();
        let a = Moments::of(&simulate(&spec, 4000, 10, 1).unwrap()).unwrap();
        let b = Moments::of(&simulate(&spec, 4000, 10, 2).unwrap()).unwrap();
        let report = MomentReport::compare(vec!["X".into(), "Y".into()], a, b, MOMENT_TOLERANCE);
        assert!(report.passed(), "{}", report.table());
        assert!(report.variance_deviation(0) < 0.05);
        // Long-run values from the stationary covariance.
        let sigma = spec.compile().unwrap().stationary_covariance().unwrap();
        assert!((report.reference.variance[1] - sigma[[1, 1]]).abs() < 0.1);
        assert!((report.reference.lag1[0][1] - (0.5 * sigma[[0, 0]] + 0.7 * sigma[[0, 1]])).abs() < 0.05);
    }

    #[test]
    fn moments_of_hand_example() {
        let values = ndarray::array![[[1.0, 2.0], [3.0, 4.0]]];
        let m = Moments::of(&PathBatch::new(values, vec!["A".into(), "B".into()]).unwrap()).unwrap();
        assert_eq!(m.mean, vec![2.0, 3.0]);
        assert_eq!(m.variance, vec![1.0, 1.0]);
        assert_eq!(m.lag1, vec![vec![3.0, 4.0], vec![6.0, 8.0]]);
    }

    #[test]
    fn tradeoff_has_one_row_per_beta() {
        let spec = tiny(ExperimentId::Exp1);
        let report = tradeoff_report(&spec, &TRADEOFF_BETAS).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.rows[0].beta, 0.0);
        assert!(report.rows.iter().all(|r| r.l1.len() == 5 && r.reconstruction.is_finite()));
        assert!(report.table().lines().count() == 4);
    }
}
