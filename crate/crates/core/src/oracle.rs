//! Exact and Monte-Carlo counterfactual ground truth for linear-Gaussian SCMs.
//!
//! The factual history is held fixed up to the intervention time `t`; the
//! intervened variable is pinned at `t` and every later noise term is drawn
//! fresh. Under these semantics each future step is Gaussian and its moments
//! follow the reduced-form recursion `m' = B m`, `S' = B S B^T + C C^T`.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scm::{CompiledScm, LinearScmSpec};

/// Pins `variable` to `value` at `time_index` (0-based within the window).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSpec {
    pub variable: String,
    pub time_index: usize,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Greater,
    Less,
}

impl Direction {
    #[inline]
    pub fn holds(self, x: f64, threshold: f64) -> bool {
        match self {
            Direction::Greater => x > threshold,
            Direction::Less => x < threshold,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Direction::Greater => Direction::Less,
            Direction::Less => Direction::Greater,
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greater" | ">" => Ok(Direction::Greater),
            "less" | "<" => Ok(Direction::Less),
            _ => Err(Error::InvalidArgument(format!("direction must be `greater` or `less`, got `{s}`"))),
        }
    }
}

/// `P(target_{t+horizon} <direction> threshold | do(intervention))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualQuery {
    pub intervention: InterventionSpec,
    pub target: String,
    pub threshold: f64,
    pub horizon: usize,
    pub direction: Direction,
}

impl CounterfactualQuery {
    pub fn validate(&self, variables: &[String]) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        for name in [&self.target, &self.intervention.variable] {
            if !variables.contains(name) {
                return Err(Error::UnknownVariable(name.clone()));
            }
        }
        if !self.intervention.value.is_finite() {
            return Err(Error::NonFinite("intervention value".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: Vec<f64>,
    pub covariance: Array2<f64>,
}

impl GaussianBelief {
    pub fn variance(&self, v: usize) -> f64 {
        self.covariance[[v, v]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtfEstimate {
    pub probability: f64,
    pub std_error: f64,
    /// Zero for analytical estimates.
    pub n_samples: usize,
    /// Set when the outcome has zero variance and sits exactly on the threshold.
    #[serde(default)]
    pub degenerate: bool,
}

impl CtfEstimate {
    pub fn from_counts(hits: usize, n: usize) -> Self {
        let p = hits as f64 / n as f64;
        Self {
            probability: p,
            std_error: (p * (1.0 - p) / n as f64).sqrt(),
            n_samples: n,
            degenerate: false,
        }
    }
}

/// Standard-normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// State at the intervention time: the factual row with the pin applied and
/// lag-0 descendants recomputed from their abducted noise.
fn intervened_state(
    scm: &CompiledScm,
    factual: ArrayView2<'_, f64>,
    pinned: (usize, f64),
) -> Result<Vec<f64>> {
    let t = factual.nrows() - 1;
    let cur: Vec<f64> = factual.row(t).to_vec();
    let has_lag0 = scm.terms.iter().any(|ts| ts.iter().any(|x| x.lag == 0));
    if !has_lag0 {
        let mut out = cur;
        out[pinned.0] = pinned.1;
        return Ok(out);
    }
    if t == 0 {
        return Err(Error::InvalidArgument(
            "lag-0 mechanisms need a factual step before the intervention".into(),
        ));
    }
    let prev: Vec<f64> = factual.row(t - 1).to_vec();
    let noise: Vec<f64> = (0..scm.n_vars())
        .map(|v| {
            let mech = scm.mechanism(v, |lag| if lag == 0 { &cur[..] } else { &prev[..] });
            (cur[v] - mech) / scm.scales[v]
        })
        .collect();
    let mut out = vec![0.0; scm.n_vars()];
    scm.step(&prev, &mut out, &noise, Some(pinned));
    Ok(out)
}

fn resolve(
    spec: &LinearScmSpec,
    factual: ArrayView2<'_, f64>,
    intervention: &InterventionSpec,
) -> Result<(CompiledScm, usize)> {
    let scm = spec.compile()?;
    if factual.ncols() != scm.n_vars() {
        return Err(Error::Shape(format!(
            "factual history has {} variables, SCM has {}",
            factual.ncols(),
            scm.n_vars()
        )));
    }
    if factual.nrows() == 0 || intervention.time_index + 1 != factual.nrows() {
        return Err(Error::InvalidArgument(format!(
            "intervention time {} must be the last factual index {}",
            intervention.time_index,
            factual.nrows() as isize - 1
        )));
    }
    let v = spec.graph.index_of(&intervention.variable)?;
    Ok((scm, v))
}

/// Gaussian beliefs for `t+1 ..= t+horizon`, where `t` is the last row of `factual`.
pub fn ctf_belief_recursion(
    spec: &LinearScmSpec,
    factual: ArrayView2<'_, f64>,
    intervention: &InterventionSpec,
    horizon: usize,
) -> Result<Vec<GaussianBelief>> {
    let (scm, v) = resolve(spec, factual, intervention)?;
    let (b, c) = scm.reduced_form();
    let noise_cov = c.dot(&c.t());
    let n = scm.n_vars();
    let mut mean = ndarray::Array1::from(intervened_state(&scm, factual, (v, intervention.value))?);
    let mut cov = Array2::<f64>::zeros((n, n));
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        mean = b.dot(&mean);
        cov = b.dot(&cov).dot(&b.t()) + &noise_cov;
        // Symmetrize against rounding drift.
        let sym = (&cov + &cov.t()) * 0.5;
        cov = sym;
        out.push(GaussianBelief { mean: mean.to_vec(), covariance: cov.clone() });
    }
    Ok(out)
}

/// Closed-form threshold probability at `query.horizon`.
pub fn ctf_probability_analytical(
    spec: &LinearScmSpec,
    beliefs: &[GaussianBelief],
    query: &CounterfactualQuery,
) -> Result<CtfEstimate> {
    let k = query.horizon;
    if k == 0 || k > beliefs.len() {
        return Err(Error::InvalidArgument(format!(
            "horizon {k} outside the {} available beliefs",
            beliefs.len()
        )));
    }
    let v = spec.graph.index_of(&query.target)?;
    let b = &beliefs[k - 1];
    Ok(gaussian_threshold(b.mean[v], b.variance(v), query.threshold, query.direction))
}

/// `P(N(mean, var) <direction> threshold)`.
pub fn gaussian_threshold(mean: f64, var: f64, threshold: f64, direction: Direction) -> CtfEstimate {
    let (probability, degenerate) = if var <= 0.0 {
        if threshold == mean {
            (0.5, true)
        } else {
            (if direction.holds(mean, threshold) { 1.0 } else { 0.0 }, false)
        }
    } else {
        let z = (threshold - mean) / var.sqrt();
        let p = match direction {
            Direction::Greater => normal_cdf(-z),
            Direction::Less => normal_cdf(z),
        };
        (p, false)
    };
    CtfEstimate { probability, std_error: 0.0, n_samples: 0, degenerate }
}

const MC_CHUNK: usize = 1 << 16;

/// Brute-force threshold probabilities for every step `1..=query.horizon`
/// from `n` simulated interventional continuations.
pub fn ctf_probabilities_mc(
    spec: &LinearScmSpec,
    factual: ArrayView2<'_, f64>,
    query: &CounterfactualQuery,
    n: usize,
    seed: u64,
) -> Result<Vec<CtfEstimate>> {
    query.validate(&spec.graph.variables)?;
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let (scm, v) = resolve(spec, factual, &query.intervention)?;
    let target = spec.graph.index_of(&query.target)?;
    let start = intervened_state(&scm, factual, (v, query.intervention.value))?;
    let nv = scm.n_vars();
    let mut hits = vec![0usize; query.horizon];
    let (mut prev, mut cur, mut eps) = (vec![0.0; nv], vec![0.0; nv], vec![0.0; nv]);
    for chunk in 0..n.div_ceil(MC_CHUNK) {
        let mut rng = rng::stream(seed ^ rng::salt::ORACLE_MC, chunk as u64);
        let len = MC_CHUNK.min(n - chunk * MC_CHUNK);
        for _ in 0..len {
            prev.copy_from_slice(&start);
            for h in hits.iter_mut() {
                for e in eps.iter_mut() {
                    *e = rng.sample(StandardNormal);
                }
                scm.step(&prev, &mut cur, &eps, None);
                std::mem::swap(&mut prev, &mut cur);
                if query.direction.holds(prev[target], query.threshold) {
                    *h += 1;
                }
            }
        }
    }
    Ok(hits.into_iter().map(|h| CtfEstimate::from_counts(h, n)).collect())
}

/// Brute-force estimate at `query.horizon` only.
pub fn ctf_probability_mc(
    spec: &LinearScmSpec,
    factual: ArrayView2<'_, f64>,
    query: &CounterfactualQuery,
    n: usize,
    seed: u64,
) -> Result<CtfEstimate> {
    Ok(*ctf_probabilities_mc(spec, factual, query, n, seed)?
        .last()
        .expect("horizon >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::symmetric_eigenvalues;
    use crate::scm::simulate;
    use ndarray::array;

    fn pin_x(value: f64, t: usize) -> InterventionSpec {
        InterventionSpec { variable: "X".into(), time_index: t, value }
    }

    fn query(value: f64, threshold: f64, horizon: usize) -> CounterfactualQuery {
        CounterfactualQuery {
            intervention: pin_x(value, 0),
            target: "Y".into(),
            threshold,
            horizon,
            direction: Direction::Greater,
        }
    }

    #[test]
    fn cdf_precision() {
        // 1 - Phi(5) from a 50-digit evaluation.
        assert!((normal_cdf(-5.0) - 2.866_515_718_791_939e-7).abs() < 1e-19);
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    }

    #[test]
    fn belief_examples() {
        let spec = LinearScmSpec::market_pair();
        let hist = array![[0.3, 0.0]];
        let b = ctf_belief_recursion(&spec, hist.view(), &pin_x(0.0, 0), 2).unwrap();
        assert!(b[0].mean[1].abs() < 1e-15);
        assert!((b[0].variance(1) - 0.36).abs() < 1e-15);
        assert!((b[1].variance(1) - 0.5989).abs() < 1e-14);

        let hist = array![[5.0, 1.0]];
        let b = ctf_belief_recursion(&spec, hist.view(), &pin_x(-2.0, 0), 1).unwrap();
        assert!((b[0].mean[1] + 0.3).abs() < 1e-15);
        assert!((b[0].variance(1) - 0.36).abs() < 1e-15);
    }

    #[test]
    fn analytical_examples() {
        let spec = LinearScmSpec::market_pair();
        let hist = array![[0.7, 0.0]];
        for k in 1..=5 {
            let b = ctf_belief_recursion(&spec, hist.view(), &pin_x(0.0, 0), k).unwrap();
            let p = ctf_probability_analytical(&spec, &b, &query(0.0, 0.0, k)).unwrap();
            assert!((p.probability - 0.5).abs() < 1e-15);
        }
        let b = ctf_belief_recursion(&spec, hist.view(), &pin_x(-2.0, 0), 1).unwrap();
        let p = ctf_probability_analytical(&spec, &b, &query(-2.0, 2.0, 1)).unwrap();
        assert!((p.probability - 2.866_515_718_791_939e-7).abs() < 1e-18);
        assert_eq!(p.n_samples, 0);
        assert_eq!(p.std_error, 0.0);
        assert!(ctf_probability_analytical(&spec, &b, &query(-2.0, 2.0, 2)).is_err());
    }

    #[test]
    fn degenerate_variance() {
        let p = gaussian_threshold(1.0, 0.0, 1.0, Direction::Greater);
        assert!(p.degenerate && p.probability == 0.5);
        assert_eq!(gaussian_threshold(1.0, 0.0, 0.0, Direction::Greater).probability, 1.0);
        assert_eq!(gaussian_threshold(1.0, 0.0, 2.0, Direction::Greater).probability, 0.0);
        assert_eq!(gaussian_threshold(1.0, 0.0, 2.0, Direction::Less).probability, 1.0);
        assert_eq!(gaussian_threshold(0.0, 4.0, 0.0, Direction::Less).probability, 0.5);
    }

    #[test]
    fn mc_agrees_with_closed_form_moments() {
        // Independent check of the hand-derived variance 0.5989 at k = 2 and
        // the mean -0.3 at k = 1.
        let spec = LinearScmSpec::market_pair();
        let hist = array![[0.0, 1.0]];
        let q = query(-2.0, -0.3, 1);
        let est = ctf_probability_mc(&spec, hist.view(), &q, 400_000, 5).unwrap();
        assert!((est.probability - 0.5).abs() < 4.0 * est.std_error);

        let hist = array![[0.0, 0.0]];
        let thr = 0.5989f64.sqrt();
        let q = query(0.0, thr, 2);
        let est = ctf_probability_mc(&spec, hist.view(), &q, 400_000, 6).unwrap();
        let want = 1.0 - normal_cdf(1.0);
        assert!((est.probability - want).abs() < 4.0 * est.std_error, "{est:?}");
    }

    #[test]
    fn mc_sure_event_and_determinism() {
        let spec = LinearScmSpec::market_pair();
        let hist = array![[0.0, 0.4]];
        let q = query(0.0, -1e300, 3);
        assert_eq!(ctf_probability_mc(&spec, hist.view(), &q, 1000, 1).unwrap().probability, 1.0);
        let q = query(1.0, 0.2, 2);
        let a = ctf_probability_mc(&spec, hist.view(), &q, 5000, 9).unwrap();
        let b = ctf_probability_mc(&spec, hist.view(), &q, 5000, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn intervention_time_must_be_last() {
        let spec = LinearScmSpec::market_pair();
        let hist = array![[0.0, 0.0], [1.0, 1.0]];
        assert!(ctf_belief_recursion(&spec, hist.view(), &pin_x(0.0, 0), 1).is_err());
        assert!(ctf_belief_recursion(&spec, hist.view(), &pin_x(0.0, 1), 1).is_ok());
        let bad = InterventionSpec { variable: "Z".into(), time_index: 1, value: 0.0 };
        assert!(ctf_belief_recursion(&spec, hist.view(), &bad, 1).is_err());
    }

    #[test]
    fn factual_past_is_not_modified_and_covariance_psd() {
        let spec = LinearScmSpec::market_pair();
        let paths = simulate(&spec, 5, 6, 2).unwrap();
        for i in 0..5 {
            let hist = paths.sequence(i).to_owned();
            let before = hist.clone();
            let b = ctf_belief_recursion(&spec, hist.view(), &pin_x(1.5, 5), 8).unwrap();
            assert_eq!(hist, before);
            for belief in &b {
                let c = &belief.covariance;
                assert_eq!(c[[0, 1]], c[[1, 0]]);
                assert!(symmetric_eigenvalues(c).iter().all(|&e| e >= -1e-10));
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn monotone_in_threshold(
                y in -3.0f64..3.0, x in -3.0f64..3.0, k in 1usize..6,
                t1 in -4.0f64..4.0, dt in 0.0f64..3.0,
            ) {
                let spec = LinearScmSpec::market_pair();
                let hist = array![[0.0, y]];
                let b = ctf_belief_recursion(&spec, hist.view(), &pin_x(x, 0), k).unwrap();
                let p1 = ctf_probability_analytical(&spec, &b, &query(x, t1, k)).unwrap();
                let p2 = ctf_probability_analytical(&spec, &b, &query(x, t1 + dt, k)).unwrap();
                prop_assert!(p2.probability <= p1.probability);
                prop_assert!((0.0..=1.0).contains(&p1.probability));
            }
        }
    }
}
