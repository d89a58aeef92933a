//! Linear-Gaussian structural causal models over time.
//!
//! Each variable evolves as
//! `value(v, t) = sum_p coeff(v, p, lag) * value(p, t - lag) + scale(v) * noise(v, t)`
//! with i.i.d. standard-normal noise. Index 0 of every path is its initial
//! condition; mechanisms apply from `t = 1` onwards.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CausalGraph, Edge};
use crate::linalg;
use crate::rng;

/// How the first retained time step of a simulated path is produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitPolicy {
    /// Draw the first step from the stationary distribution.
    Stationary,
    /// Start every sequence at the given values (graph order).
    Fixed(Vec<f64>),
    /// Start at zero and discard this many leading steps.
    BurnIn(usize),
}

impl Default for InitPolicy {
    fn default() -> Self {
        InitPolicy::BurnIn(100)
    }
}

/// One mechanism coefficient `target <- parent` at `lag`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(String, String, usize, f64)", into = "(String, String, usize, f64)")]
pub struct Coefficient {
    pub target: String,
    pub parent: String,
    pub lag: usize,
    pub value: f64,
}

impl From<(String, String, usize, f64)> for Coefficient {
    fn from((target, parent, lag, value): (String, String, usize, f64)) -> Self {
        Self { target, parent, lag, value }
    }
}

impl From<Coefficient> for (String, String, usize, f64) {
    fn from(c: Coefficient) -> Self {
        (c.target, c.parent, c.lag, c.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearScmSpec {
    pub graph: CausalGraph,
    pub coefficients: Vec<Coefficient>,
    pub noise_scale: BTreeMap<String, f64>,
    #[serde(default)]
    pub init: InitPolicy,
}

/// A parent term of a compiled mechanism.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Term {
    pub parent: usize,
    pub lag: usize,
    pub coeff: f64,
}

/// Index-resolved form of a validated [`LinearScmSpec`].
#[derive(Clone, Debug)]
pub struct CompiledScm {
    pub order: Vec<usize>,
    pub terms: Vec<Vec<Term>>,
    pub scales: Vec<f64>,
}

impl LinearScmSpec {
    /// `X_t = 0.8 X_{t-1} + 0.5 eta_t`, `Y_t = 0.7 Y_{t-1} + 0.5 X_{t-1} + 0.6 eps_t`.
    pub fn market_pair() -> Self {
        let c = |t: &str, p: &str, v: f64| Coefficient {
            target: t.into(),
            parent: p.into(),
            lag: 1,
            value: v,
        };
        Self {
            graph: CausalGraph::market_pair(),
            coefficients: vec![c("X", "X", 0.8), c("Y", "Y", 0.7), c("Y", "X", 0.5)],
            noise_scale: [("X".to_string(), 0.5), ("Y".to_string(), 0.6)].into(),
            init: InitPolicy::default(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.graph.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.compile().map(|_| ())
    }

    pub fn compile(&self) -> Result<CompiledScm> {
        self.graph
            .validate()
            .map_err(|v| Error::InvalidGraph(v.to_string()))?;
        self.graph.check_supported_lags()?;
        let n = self.graph.len();
        let mut terms: Vec<Vec<Term>> = vec![Vec::new(); n];
        for c in &self.coefficients {
            let edge = Edge::new(c.parent.clone(), c.target.clone(), c.lag);
            if !self.graph.edges.contains(&edge) {
                return Err(Error::InvalidScm(format!(
                    "coefficient {} <- {} (lag {}) has no matching edge",
                    c.target, c.parent, c.lag
                )));
            }
            if !c.value.is_finite() {
                return Err(Error::InvalidScm(format!(
                    "coefficient {} <- {} is not finite",
                    c.target, c.parent
                )));
            }
            let t = self.graph.index_of(&c.target)?;
            let p = self.graph.index_of(&c.parent)?;
            if terms[t].iter().any(|term| term.parent == p && term.lag == c.lag) {
                return Err(Error::InvalidScm(format!(
                    "duplicate coefficient {} <- {} (lag {})",
                    c.target, c.parent, c.lag
                )));
            }
            terms[t].push(Term { parent: p, lag: c.lag, coeff: c.value });
        }
        for ts in terms.iter_mut() {
            ts.sort_by_key(|t| (t.parent, t.lag));
        }
        let mut scales = Vec::with_capacity(n);
        for v in &self.graph.variables {
            match self.noise_scale.get(v) {
                Some(&s) if s > 0.0 && s.is_finite() => scales.push(s),
                Some(&s) => {
                    return Err(Error::InvalidScm(format!(
                        "noise scale of `{v}` must be positive, got {s}"
                    )))
                }
                None => return Err(Error::InvalidScm(format!("missing noise scale for `{v}`"))),
            }
        }
        if let Some(k) = self.noise_scale.keys().find(|k| !self.graph.variables.contains(k)) {
            return Err(Error::UnknownVariable(k.clone()));
        }
        match &self.init {
            InitPolicy::Stationary => {
                for (v, ts) in terms.iter().enumerate() {
                    let own = ts
                        .iter()
                        .find(|t| t.parent == v && t.lag == 1)
                        .map_or(0.0, |t| t.coeff);
                    if own.abs() >= 1.0 {
                        return Err(Error::InvalidScm(format!(
                            "stationary init needs |self-lag coefficient| < 1 for `{}`",
                            self.graph.variables[v]
                        )));
                    }
                }
            }
            InitPolicy::Fixed(vals) if vals.len() != n => {
                return Err(Error::InvalidScm(format!(
                    "fixed init has {} values for {n} variables",
                    vals.len()
                )))
            }
            _ => {}
        }
        let order = self.graph.topological_indices()?;
        Ok(CompiledScm { order, terms, scales })
    }
}

impl CompiledScm {
    pub fn n_vars(&self) -> usize {
        self.scales.len()
    }

    /// Deterministic part of `value(v, t)`; `row(lag)` yields the values at `t - lag`.
    #[inline]
    pub fn mechanism<'a>(&self, v: usize, row: impl Fn(usize) -> &'a [f64]) -> f64 {
        self.terms[v]
            .iter()
            .map(|t| t.coeff * row(t.lag)[t.parent])
            .sum()
    }

    /// Evaluates one time step in place: `cur` holds pinned values for
    /// variables in `pinned` and receives every other variable.
    pub fn step(&self, prev: &[f64], cur: &mut [f64], noise: &[f64], pinned: Option<(usize, f64)>) {
        for &v in &self.order {
            if let Some((pv, val)) = pinned {
                if pv == v {
                    cur[v] = val;
                    continue;
                }
            }
            let mut acc = self.scales[v] * noise[v];
            for t in &self.terms[v] {
                acc += t.coeff * if t.lag == 0 { cur[t.parent] } else { prev[t.parent] };
            }
            cur[v] = acc;
        }
    }

    /// Reduced-form matrices of `x_t = B x_{t-1} + C e_t`, where lag-0 terms
    /// are solved out.
    pub fn reduced_form(&self) -> (Array2<f64>, Array2<f64>) {
        let n = self.n_vars();
        let mut a0 = Array2::<f64>::zeros((n, n));
        let mut a1 = Array2::<f64>::zeros((n, n));
        for (v, ts) in self.terms.iter().enumerate() {
            for t in ts {
                if t.lag == 0 {
                    a0[[v, t.parent]] += t.coeff;
                } else {
                    a1[[v, t.parent]] += t.coeff;
                }
            }
        }
        // Lag-0 part is nilpotent, so (I - A0)^-1 = I + A0 + A0^2 + ...
        let mut inv = Array2::<f64>::eye(n);
        let mut pow = Array2::<f64>::eye(n);
        for _ in 0..n {
            pow = pow.dot(&a0);
            inv = inv + &pow;
        }
        let b = inv.dot(&a1);
        let c = inv.dot(&Array2::from_diag(&ndarray::Array1::from(self.scales.clone())));
        (b, c)
    }

    /// Stationary covariance of the reduced-form process, by doubling.
    pub fn stationary_covariance(&self) -> Result<Array2<f64>> {
        let (b, c) = self.reduced_form();
        let mut sigma = c.dot(&c.t());
        let mut pow = b.clone();
        for _ in 0..64 {
            let next = &sigma + &pow.dot(&sigma).dot(&pow.t());
            let delta = (&next - &sigma).iter().fold(0.0f64, |m, d| m.max(d.abs()));
            sigma = next;
            pow = pow.dot(&pow);
            if delta < 1e-15 {
                return Ok(sigma);
            }
            if !delta.is_finite() {
                break;
            }
        }
        Err(Error::InvalidScm("process is not stationary".into()))
    }
}

/// A batch of multivariate paths, shape `[n_sequences, T, n_variables]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBatch {
    pub values: Array3<f64>,
    pub variables: Vec<String>,
}

impl PathBatch {
    pub fn new(values: Array3<f64>, variables: Vec<String>) -> Result<Self> {
        let (n, t, v) = values.dim();
        if n == 0 || t == 0 {
            return Err(Error::Shape(format!("empty path batch [{n}, {t}, {v}]")));
        }
        if v != variables.len() {
            return Err(Error::Shape(format!(
                "{v} value columns for {} variable names",
                variables.len()
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("path batch entry".into()));
        }
        Ok(Self { values, variables })
    }

    pub fn n_sequences(&self) -> usize {
        self.values.dim().0
    }

    pub fn len_t(&self) -> usize {
        self.values.dim().1
    }

    pub fn n_vars(&self) -> usize {
        self.values.dim().2
    }

    /// Values at `t = 0`, shape `[n, V]`.
    pub fn initial_values(&self) -> Array2<f64> {
        self.values.index_axis(Axis(1), 0).to_owned()
    }

    /// Sequence `i` as a `[T, V]` view.
    pub fn sequence(&self, i: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), i)
    }

    /// A single-sequence batch holding sequence `i`, truncated to `len` steps.
    pub fn row(&self, i: usize, len: usize) -> PathBatch {
        let v = self
            .values
            .slice(ndarray::s![i..i + 1, ..len, ..])
            .to_owned();
        PathBatch { values: v, variables: self.variables.clone() }
    }

    /// Subset of sequences by index.
    pub fn select(&self, idx: &[usize]) -> PathBatch {
        PathBatch {
            values: self.values.select(Axis(0), idx),
            variables: self.variables.clone(),
        }
    }

    /// Writes `sequence,t,<vars...>` with 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = std::io::BufWriter::new(w);
        write!(out, "sequence,t")?;
        for v in &self.variables {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
        let (n, t_len, nv) = self.values.dim();
        for i in 0..n {
            for t in 0..t_len {
                write!(out, "{i},{t}")?;
                for v in 0..nv {
                    write!(out, ",{:.16e}", self.values[[i, t, v]])?;
                }
                writeln!(out)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Parses the format written by [`PathBatch::write_csv`]. Rows may come
    /// in any order but every `(sequence, t)` cell must be present once.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let headers = rdr.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
        if headers.len() < 3 || &headers[0] != "sequence" || &headers[1] != "t" {
            return Err(Error::Csv("header must start with `sequence,t`".into()));
        }
        let variables: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
        let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
            let parse_idx = |k: usize| -> Result<usize> {
                rec[k]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Csv(format!("bad index `{}`", &rec[k])))
            };
            let (i, t) = (parse_idx(0)?, parse_idx(1)?);
            let vals = rec
                .iter()
                .skip(2)
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Csv(format!("bad value `{s}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != variables.len() {
                return Err(Error::Csv(format!("row ({i},{t}) has wrong width")));
            }
            rows.push((i, t, vals));
        }
        let n = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let t_len = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        if rows.len() != n * t_len {
            return Err(Error::Csv(format!(
                "expected {} rows for {n} sequences of length {t_len}, found {}",
                n * t_len,
                rows.len()
            )));
        }
        let mut values = Array3::<f64>::from_elem((n, t_len, variables.len()), f64::NAN);
        for (i, t, vals) in rows {
            for (v, x) in vals.into_iter().enumerate() {
                values[[i, t, v]] = x;
            }
        }
        if values.iter().any(|x| x.is_nan()) {
            return Err(Error::Csv("duplicate or missing (sequence, t) rows".into()));
        }
        PathBatch::new(values, variables)
    }
}

/// Standard-normal draws (before scaling), shape `[n_sequences, T, n_variables]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBatch {
    pub values: Array3<f64>,
}

/// Evaluates mechanisms step by step from the given initial values.
///
/// `init` is `[n, V]`, or `[1, V]` to share one initial state. Noise at
/// `t = 0` is ignored.
pub fn simulate_with_noise(
    spec: &LinearScmSpec,
    noise: &NoiseBatch,
    init: &Array2<f64>,
) -> Result<PathBatch> {
    let scm = spec.compile()?;
    let (n, t_len, nv) = noise.values.dim();
    if nv != scm.n_vars() {
        return Err(Error::Shape(format!("noise has {nv} variables, SCM has {}", scm.n_vars())));
    }
    if init.ncols() != nv || (init.nrows() != n && init.nrows() != 1) {
        return Err(Error::Shape(format!(
            "initial values {:?} incompatible with {n} sequences of {nv} variables",
            init.dim()
        )));
    }
    if n == 0 || t_len == 0 {
        return Err(Error::Shape("empty noise batch".into()));
    }
    let mut values = Array3::<f64>::zeros((n, t_len, nv));
    let mut prev = vec![0.0; nv];
    let mut cur = vec![0.0; nv];
    let mut eps = vec![0.0; nv];
    for i in 0..n {
        let init_row = init.row(if init.nrows() == 1 { 0 } else { i });
        for v in 0..nv {
            prev[v] = init_row[v];
            values[[i, 0, v]] = init_row[v];
        }
        for t in 1..t_len {
            for v in 0..nv {
                eps[v] = noise.values[[i, t, v]];
            }
            scm.step(&prev, &mut cur, &eps, None);
            for v in 0..nv {
                values[[i, t, v]] = cur[v];
            }
            std::mem::swap(&mut prev, &mut cur);
        }
    }
    PathBatch::new(values, spec.graph.variables.clone())
}

/// Draws `n` sequences of length `t_len`. Sequence `i` uses its own
/// generator derived from `(seed, i)`, so the output does not depend on
/// generation order.
pub fn simulate(spec: &LinearScmSpec, n: usize, t_len: usize, seed: u64) -> Result<PathBatch> {
    if n == 0 || t_len == 0 {
        return Err(Error::InvalidArgument("n and T must be at least 1".into()));
    }
    let scm = spec.compile()?;
    let nv = scm.n_vars();
    let stationary_chol = match spec.init {
        InitPolicy::Stationary => Some(linalg::cholesky_psd(&scm.stationary_covariance()?)),
        _ => None,
    };
    let mut values = Array3::<f64>::zeros((n, t_len, nv));
    let mut prev = vec![0.0; nv];
    let mut cur = vec![0.0; nv];
    let mut eps = vec![0.0; nv];
    for i in 0..n {
        let mut rng = rng::stream(seed, i as u64);
        let burn_in = match &spec.init {
            InitPolicy::BurnIn(b) => {
                prev.iter_mut().for_each(|x| *x = 0.0);
                *b
            }
            InitPolicy::Fixed(vals) => {
                prev.copy_from_slice(vals);
                0
            }
            InitPolicy::Stationary => {
                let l = stationary_chol.as_ref().expect("computed above");
                for e in eps.iter_mut() {
                    *e = rng.sample(StandardNormal);
                }
                for (r, p) in prev.iter_mut().enumerate() {
                    *p = (0..=r).map(|c| l[[r, c]] * eps[c]).sum();
                }
                0
            }
        };
        // For burn-in, the retained first step is the last discarded one's
        // successor, so the loop runs burn_in + t_len - 1 mechanism steps.
        let total = if burn_in > 0 { burn_in + t_len } else { t_len - 1 };
        let keep_from = total + 1 - t_len;
        if keep_from == 0 {
            for v in 0..nv {
                values[[i, 0, v]] = prev[v];
            }
        }
        for step in 1..=total {
            for e in eps.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            scm.step(&prev, &mut cur, &eps, None);
            std::mem::swap(&mut prev, &mut cur);
            if step >= keep_from {
                let t = step - keep_from;
                for v in 0..nv {
                    values[[i, t, v]] = prev[v];
                }
            }
        }
    }
    PathBatch::new(values, spec.graph.variables.clone())
}

/// Recovers the standardized noise that produced `path` under `spec`.
/// Entries at `t = 0` are zero.
pub fn abduct_noise(spec: &LinearScmSpec, path: &PathBatch) -> Result<NoiseBatch> {
    let scm = spec.compile()?;
    if path.variables != spec.graph.variables {
        return Err(Error::Shape(format!(
            "path variables {:?} differ from SCM variables {:?}",
            path.variables, spec.graph.variables
        )));
    }
    let (n, t_len, nv) = path.values.dim();
    let mut noise = Array3::<f64>::zeros((n, t_len, nv));
    for i in 0..n {
        let seq = path.sequence(i);
        for t in 1..t_len {
            let cur = seq.row(t);
            let prev = seq.row(t - 1);
            let (cur, prev) = (cur.as_slice().unwrap(), prev.as_slice().unwrap());
            for v in 0..nv {
                let mech = scm.mechanism(v, |lag| if lag == 0 { cur } else { prev });
                noise[[i, t, v]] = (cur[v] - mech) / scm.scales[v];
            }
        }
    }
    Ok(NoiseBatch { values: noise })
}
