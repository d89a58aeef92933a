use ndarray::s;
use tncm_core::oracle::{
    ctf_belief_recursion, ctf_probabilities_mc, ctf_probability_analytical, CounterfactualQuery, Direction,
    InterventionSpec,
};
use tncm_core::scm::{abduct_noise, simulate, simulate_with_noise, LinearScmSpec};

fn query(value: f64, threshold: f64, horizon: usize) -> CounterfactualQuery {
    CounterfactualQuery {
        intervention: InterventionSpec { variable: "X".into(), time_index: 4, value },
        target: "Y".into(),
        threshold,
        horizon,
        direction: Direction::Greater,
    }
}

#[test]
fn analytical_matches_monte_carlo_on_random_histories() {
    let spec = LinearScmSpec::market_pair();
    let histories = simulate(&spec, 6, 5, 21).unwrap();
    for (value, threshold) in [(0.0, 0.0), (-2.0, 2.0)] {
        for i in 0..histories.n_sequences() {
            let h = histories.sequence(i);
            let q = query(value, threshold, 5);
            let beliefs = ctf_belief_recursion(&spec, h, &q.intervention, 5).unwrap();
            let mc = ctf_probabilities_mc(&spec, h, &q, 100_000, i as u64).unwrap();
            for k in 1..=5 {
                let exact = ctf_probability_analytical(&spec, &beliefs, &query(value, threshold, k)).unwrap();
                let est = &mc[k - 1];
                let tol = (4.0 * est.std_error).max(0.002);
                assert!(
                    (exact.probability - est.probability).abs() <= tol,
                    "history {i} k {k}: {} vs {}",
                    exact.probability,
                    est.probability
                );
            }
        }
    }
}

#[test]
fn first_step_belief_has_closed_form() {
    let spec = LinearScmSpec::market_pair();
    let histories = simulate(&spec, 20, 5, 3).unwrap();
    for i in 0..20 {
        let h = histories.sequence(i);
        let y = h[[4, 1]];
        let b = ctf_belief_recursion(&spec, h, &query(-2.0, 2.0, 1).intervention, 2).unwrap();
        assert!((b[0].mean[1] - (0.7 * y - 1.0)).abs() < 1e-12);
        assert!((b[0].variance(1) - 0.36).abs() < 1e-12);
        assert!((b[0].mean[0] + 1.6).abs() < 1e-12);
        // Second step: Y = 0.7 Y1 + 0.5 X1 + noise.
        let mean2 = 0.7 * (0.7 * y - 1.0) + 0.5 * (-1.6);
        let var2 = 0.49 * 0.36 + 0.25 * 0.25 + 0.36;
        assert!((b[1].mean[1] - mean2).abs() < 1e-12);
        assert!((b[1].variance(1) - var2).abs() < 1e-12);
    }
}

#[test]
fn abduction_round_trip_on_many_sequences() {
    let spec = LinearScmSpec::market_pair();
    let paths = simulate(&spec, 1000, 10, 8).unwrap();
    let noise = abduct_noise(&spec, &paths).unwrap();
    let again = simulate_with_noise(&spec, &noise, &paths.initial_values()).unwrap();
    let worst = (&again.values - &paths.values).iter().fold(0.0f64, |m, d| m.max(d.abs()));
    assert!(worst <= 1e-12, "{worst}");
    assert_eq!(noise.values.slice(s![.., 1.., ..]).len(), 1000 * 9 * 2);
}
