//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria are reported rather than asserted, so a red criterion shows up
//! in the output without aborting the remaining ones. The process fails
//! only if the harness itself cannot run.

use std::fs;
use std::process::Command;
use std::time::Instant;

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tncm_core::ctf::{counterfactual_paths, factual_paths, CtfRequest};
use tncm_core::experiment::{
    observational_fit, run_experiments_with, run_oracle_selftest, run_untrained_control, ExperimentSpec, L1Report,
    L1_TOLERANCE, MOMENT_TOLERANCE, SELFTEST_TOLERANCE,
};
use tncm_core::graph::{CausalGraph, Edge};
use tncm_core::model::{train, Checkpoint, Model, ModelConfig};
use tncm_core::nn::{coupling_forward, coupling_inverse, AffineCoupling, ParamStore};
use tncm_core::oracle::{
    ctf_belief_recursion, ctf_probabilities_mc, ctf_probability_analytical, CounterfactualQuery, Direction,
    InterventionSpec,
};
use tncm_core::scm::{abduct_noise, simulate, simulate_with_noise, LinearScmSpec};

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn report(o: &Outcome) {
    println!(
        "criterion {:>2} {}  {} :: {} [{:.1}s]",
        o.id,
        if o.pass { "PASS" } else { "FAIL" },
        o.name,
        o.detail,
        o.secs
    );
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normals(shape: (usize, usize, usize), r: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || r.sample(StandardNormal))
}

fn pin(variable: &str, time_index: usize, value: f64) -> InterventionSpec {
    InterventionSpec { variable: variable.into(), time_index, value }
}

fn oracle_cross_validation() -> (bool, String) {
    let spec = LinearScmSpec::market_pair();
    let histories = simulate(&spec, 20, 5, 0xacce).unwrap();
    let mut worst_ratio = 0.0f64;
    let mut worst_diff = 0.0f64;
    for (value, threshold) in [(0.0, 0.0), (-2.0, 2.0)] {
        for i in 0..20 {
            let h = histories.sequence(i);
            let q = CounterfactualQuery {
                intervention: pin("X", 4, value),
                target: "Y".into(),
                threshold,
                horizon: 5,
                direction: Direction::Greater,
            };
            let beliefs = ctf_belief_recursion(&spec, h, &q.intervention, 5).unwrap();
            let mc = ctf_probabilities_mc(&spec, h, &q, 1_000_000, 1000 + i as u64).unwrap();
            for k in 1..=5 {
                let exact = ctf_probability_analytical(&spec, &beliefs, &CounterfactualQuery { horizon: k, ..q.clone() })
                    .unwrap()
                    .probability;
                let diff = (exact - mc[k - 1].probability).abs();
                let tol = (4.0 * mc[k - 1].std_error).max(0.002);
                worst_ratio = worst_ratio.max(diff / tol);
                worst_diff = worst_diff.max(diff);
            }
        }
    }
    (
        worst_ratio <= 1.0,
        format!("200 comparisons, max |analytic-MC| {worst_diff:.2e}, max diff/tolerance {worst_ratio:.3}"),
    )
}

fn l1_line(r: &L1Report) -> String {
    let per: Vec<String> = r.rows.iter().map(|x| format!("{:.3}", x.l1)).collect();
    let failed: Vec<String> =
        r.seeds.iter().filter(|s| s.error.is_some()).map(|s| format!("seed {} failed", s.seed)).collect();
    let mut out = format!("L1 by horizon [{}] mean {:.3}", per.join(", "), if r.rows.is_empty() { f64::NAN } else { r.mean_l1() });
    if !failed.is_empty() {
        out.push_str(&format!(" ({})", failed.join(", ")));
    }
    out
}

/// Relative error `|a - b| / max(|a|, |b|, 1e-6)`.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn gradient_integrity() -> (bool, String) {
    let mut r = rng(0x9ead);
    let mut worst = 0.0f64;
    let mut scalars = 0;
    for trial in 0..10u64 {
        let graph = if trial % 3 == 2 {
            CausalGraph::new(
                vec!["A".into(), "B".into(), "C".into()],
                vec![Edge::new("A", "B", 0), Edge::new("B", "C", 1), Edge::new("C", "C", 1), Edge::new("A", "A", 1)],
            )
            .unwrap()
        } else {
            CausalGraph::market_pair()
        };
        let config = ModelConfig {
            graph: graph.clone(),
            latent_dim: r.random_range(1..=2),
            encoder_width: r.random_range(2..=5),
            gru_hidden: r.random_range(2..=4),
            decoder_hidden: r.random_range(2..=5),
            flow_depth: r.random_range(1..=2),
            flow_hidden: r.random_range(2..=4),
            seq_len: r.random_range(2..=4),
            beta: r.random_range(0.0..2.0),
            seed: trial,
            ..ModelConfig::default()
        };
        let mut model = Model::new(config.clone()).unwrap();
        // Move away from the identity-initialised flow heads.
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            let id = model.params().id(name).unwrap();
            model.params_mut().get_mut(id).mapv_inplace(|x| x + r.random_range(-0.3..0.3));
        }
        let n = 3;
        let v = graph.len();
        let data = tncm_core::PathBatch::new(normals((n, config.seq_len, v), &mut r), graph.variables.clone()).unwrap();
        let eps = normals((n, config.seq_len, model.latent_width()), &mut r);
        let (_, grads) = model.elbo_gradient(data.values.view(), eps.view(), config.beta).unwrap();
        let h = 1e-5;
        for (pi, name) in names.iter().enumerate() {
            let id = model.params().id(name).unwrap();
            let shape = model.params().get(id).dim();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let x0 = model.params().get(id)[[i, j]];
                    model.params_mut().get_mut(id)[[i, j]] = x0 + h;
                    let up = model.elbo_loss(&data, &eps, config.beta).unwrap().total;
                    model.params_mut().get_mut(id)[[i, j]] = x0 - h;
                    let down = model.elbo_loss(&data, &eps, config.beta).unwrap().total;
                    model.params_mut().get_mut(id)[[i, j]] = x0;
                    let fd = (up - down) / (2.0 * h);
                    worst = worst.max(rel_err(grads.values[pi][[i, j]], fd));
                    scalars += 1;
                }
            }
        }
    }
    (worst <= 1e-4, format!("10 configurations, {scalars} parameters, max relative error {worst:.2e}"))
}

fn flow_correctness() -> (bool, String) {
    let mut r = rng(0xf10e);
    let mut inv_err = 0.0f64;
    let mut det_err = 0.0f64;
    for trial in 0..20 {
        let dim = if trial < 10 { 2 } else { r.random_range(1..=6) };
        let cond_dim = if dim == 1 { 1 } else { r.random_range(0..=2) };
        let mut store = ParamStore::new();
        let layer = AffineCoupling::new(&mut store, "c", dim, cond_dim, 5, trial, &mut r).unwrap();
        for id in [layer.head.weight, layer.head.bias] {
            store.get_mut(id).mapv_inplace(|_| r.random_range(-0.8..0.8));
        }
        for _ in 0..10 {
            let u: Vec<f64> = (0..dim).map(|_| 2.0 * r.sample::<f64, _>(StandardNormal)).collect();
            let c: Vec<f64> = (0..cond_dim).map(|_| r.sample(StandardNormal)).collect();
            let (v, log_det) = coupling_forward(&store, &layer, &u, &c).unwrap();
            let (back, inv_log_det) = coupling_inverse(&store, &layer, &v, &c).unwrap();
            for (a, b) in u.iter().zip(&back) {
                inv_err = inv_err.max((a - b).abs());
            }
            inv_err = inv_err.max((log_det + inv_log_det).abs());
            if dim == 2 {
                let h = 1e-6;
                let mut jac = [[0.0; 2]; 2];
                for k in 0..2 {
                    let (mut up, mut dn) = (u.clone(), u.clone());
                    up[k] += h;
                    dn[k] -= h;
                    let fu = coupling_forward(&store, &layer, &up, &c).unwrap().0;
                    let fd = coupling_forward(&store, &layer, &dn, &c).unwrap().0;
                    for row in 0..2 {
                        jac[row][k] = (fu[row] - fd[row]) / (2.0 * h);
                    }
                }
                let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
                det_err = det_err.max((det.abs().ln() - log_det).abs());
            }
        }
    }

    // A trained 1-D prior must integrate to one at every step.
    let graph = CausalGraph::new(vec!["X".into()], vec![Edge::new("X", "X", 1)]).unwrap();
    let mut spec = LinearScmSpec::market_pair();
    spec.graph = graph.clone();
    spec.coefficients.retain(|c| c.target == "X" && c.parent == "X");
    spec.noise_scale.retain(|k, _| k == "X");
    let config = ModelConfig { graph, latent_dim: 1, seq_len: 6, epochs: 20, seed: 3, ..ModelConfig::default() };
    let (ck, _) = train(&config, &simulate(&spec, 1000, 6, 4).unwrap()).unwrap();
    let (lo, hi, n) = (-20.0, 20.0, 80_001);
    let h = (hi - lo) / (n - 1) as f64;
    let grid = Array2::from_shape_fn((n, 1), |(i, _)| lo + h * i as f64);
    let mut mass_err = 0.0f64;
    for t in 0..config.seq_len {
        let d: Vec<f64> = ck.model.prior_log_density(&grid, t).unwrap().iter().map(|x| x.exp()).collect();
        let mass = h * (d.iter().sum::<f64>() - 0.5 * (d[0] + d[n - 1]));
        mass_err = mass_err.max((mass - 1.0).abs());
    }
    (
        inv_err <= 1e-10 && det_err <= 1e-6 && mass_err <= 1e-3,
        format!("inverse∘forward {inv_err:.1e}, log-det vs numeric Jacobian {det_err:.1e}, 1-D quadrature |mass-1| {mass_err:.1e}"),
    )
}

fn causal_invariances(model: &Model) -> (bool, String) {
    let mut r = rng(0xca05);
    let d = model.latent_width();
    let (mut null_ok, mut past_ok, mut nondesc_ok) = (true, true, true);
    let same = |a: f64, b: f64| a.to_bits() == b.to_bits();
    for _ in 0..50 {
        let u = normals((4, 10, d), &mut r);
        let base = model.decode(&u, &[], None).unwrap();
        let t = r.random_range(0..10);
        let c: f64 = 3.0 * r.sample::<f64, _>(StandardNormal);

        // Pinning each sequence's own decoded value changes nothing.
        for i in 0..4 {
            let one = u.slice(s![i..i + 1, .., ..]).to_owned();
            let again = model.decode(&one, &[pin("X", t, base.values[[i, t, 0]])], None).unwrap();
            null_ok &= again.values.iter().zip(base.values.slice(s![i, .., ..]).iter()).all(|(a, b)| same(*a, *b));
        }

        let px = model.decode(&u, &[pin("X", t, c)], None).unwrap();
        past_ok &= px.values.slice(s![.., ..t, ..]).iter().zip(base.values.slice(s![.., ..t, ..])).all(|(a, b)| same(*a, *b));
        past_ok &= px.values.slice(s![.., t, 0]).iter().all(|&x| x == c);

        let py = model.decode(&u, &[pin("Y", t, c)], None).unwrap();
        nondesc_ok &= py.values.slice(s![.., .., 0]).iter().zip(base.values.slice(s![.., .., 0])).all(|(a, b)| same(*a, *b));
    }
    // The same identity through the counterfactual engine.
    let factual = simulate(&LinearScmSpec::market_pair(), 1, 5, 77).unwrap();
    let req = CtfRequest {
        intervention: pin("X", 4, factual.values[[0, 4, 0]]),
        factual,
        horizon: 5,
        n_samples: 256,
        seed: 9,
    };
    null_ok &= counterfactual_paths(model, &req).unwrap() == factual_paths(model, &req).unwrap();
    (
        null_ok && past_ok && nondesc_ok,
        format!("50 latent draws: null-intervention {null_ok}, past {past_ok}, non-descendant {nondesc_ok}"),
    )
}

fn abduction_round_trip() -> (bool, String) {
    let spec = LinearScmSpec::market_pair();
    let paths = simulate(&spec, 1000, 10, 0xabd).unwrap();
    let noise = abduct_noise(&spec, &paths).unwrap();
    let again = simulate_with_noise(&spec, &noise, &paths.initial_values()).unwrap();
    let worst = (&again.values - &paths.values).iter().fold(0.0f64, |m, d| m.max(d.abs()));
    (worst <= 1e-12, format!("1000 sequences, max |re-simulated - original| {worst:.1e}"))
}

fn determinism() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("reduced.json");
    fs::write(
        &config,
        r#"{"n_train": 1000, "n_eval_histories": 20, "ctf_samples": 1024, "seeds": [0],
            "model": {"epochs": 5}, "seed": 42}"#,
    )
    .unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_tncm"))
            .args(["reproduce", "--experiment", "1", "--config"])
            .arg(&config)
            .arg("--output-dir")
            .arg(&out)
            .output()
            .unwrap();
        let code = status.status.code();
        if !matches!(code, Some(0) | Some(5)) {
            return (false, format!("reproduce exited with {code:?}: {}", String::from_utf8_lossy(&status.stderr)));
        }
        outputs.push(fs::read(out.join("exp1_curves.csv")).unwrap());
    }
    let same = outputs[0] == outputs[1];
    (same, format!("two reduced-budget runs, exp1_curves.csv byte-identical: {same} ({} bytes)", outputs[0].len()))
}

fn main() {
    // Accept and ignore libtest-style arguments such as `--nocapture`.
    let started = Instant::now();
    let mut outcomes = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &mut dyn FnMut() -> (bool, String)| {
        let t = Instant::now();
        let (pass, detail) = f();
        let o = Outcome { id, name, pass, detail, secs: t.elapsed().as_secs_f64() };
        report(&o);
        outcomes.push(o);
    };

    run(1, "oracle cross-validation", &mut || {
        let t = Instant::now();
        let (pass, detail) = oracle_cross_validation();
        let secs = t.elapsed().as_secs_f64();
        (pass && secs <= 60.0, format!("{detail}, runtime {secs:.1}s (limit 60s)"))
    });

    // Train once per seed and answer both query families.
    let specs = [ExperimentSpec::exp1(), ExperimentSpec::exp2()];
    let t = Instant::now();
    let mut first: Option<Checkpoint> = None;
    let reports = run_experiments_with(&specs, |seed, r| {
        if let Ok(ck) = r {
            eprintln!("trained seed {seed}: final loss {:.4}", ck.meta.final_loss.unwrap_or(f64::NAN));
            if first.is_none() {
                first = Some(ck.clone());
            }
        }
    })
    .expect("experiments run");
    let train_secs = t.elapsed().as_secs_f64();
    let (exp1, exp2) = (&reports[0], &reports[1]);
    run(2, "exp1 reproduction (L1 <= 0.15 per horizon)", &mut || {
        (exp1.within(L1_TOLERANCE), format!("{}; 3 seeds x 100 histories; shared runtime {train_secs:.0}s", l1_line(exp1)))
    });
    run(3, "exp2 reproduction + untrained control", &mut || {
        let control = run_untrained_control(&specs[1]).expect("control runs");
        let control_h1 = control.rows[0].l1;
        let discriminates = control_h1 > 0.2;
        (
            exp2.within(L1_TOLERANCE) && discriminates,
            format!(
                "trained {}; untrained control L1@1 {control_h1:.3} (must exceed 0.2: {discriminates})",
                l1_line(exp2)
            ),
        )
    });
    run(4, "gradient integrity", &mut gradient_integrity);
    run(5, "flow correctness", &mut flow_correctness);
    let model = first.as_ref().map(|ck| ck.model.clone());
    run(6, "causal invariances (bitwise)", &mut || match &model {
        Some(m) => causal_invariances(m),
        None => (false, "no trained model".into()),
    });
    run(7, "abduction round-trip", &mut abduction_round_trip);
    run(8, "observational fit", &mut || {
        let Some(m) = &model else { return (false, "no trained model".into()) };
        let fit = observational_fit(m, &LinearScmSpec::market_pair(), 20_000, 8).unwrap();
        let devs = [fit.variance_deviation(0), fit.variance_deviation(1), fit.lag1_deviation(0, 1)];
        let pass = devs.iter().all(|&d| d <= MOMENT_TOLERANCE);
        (
            pass,
            format!(
                "Var(X) {:.3} vs {:.3}, Var(Y) {:.3} vs {:.3}, E[X(t-1)Y(t)] {:.3} vs {:.3}; max deviation {:.3}",
                fit.generated.variance[0],
                fit.reference.variance[0],
                fit.generated.variance[1],
                fit.reference.variance[1],
                fit.generated.lag1[0][1],
                fit.reference.lag1[0][1],
                devs.iter().fold(0.0f64, |a, &b| a.max(b))
            ),
        )
    });
    run(9, "harness isolation (oracle self-test)", &mut || {
        let a = run_oracle_selftest(&specs[0]).expect("self-test runs");
        let b = run_oracle_selftest(&specs[1]).expect("self-test runs");
        (
            a.within(SELFTEST_TOLERANCE) && b.within(SELFTEST_TOLERANCE),
            format!("exp1 max L1 {:.4}, exp2 max L1 {:.4} (limit 0.01)", a.max_l1(), b.max_l1()),
        )
    });
    run(10, "determinism of `reproduce --experiment 1`", &mut determinism);

    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s",
        outcomes.len(),
        started.elapsed().as_secs_f64()
    );
    for o in outcomes.iter().filter(|o| !o.pass) {
        println!("  red: criterion {} ({})", o.id, o.name);
    }
}
