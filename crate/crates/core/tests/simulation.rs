mod common;

use common::{load, random_deterministic, rel, seeded};
use mftg_core::simulate::exact_moment_path;
use mftg_core::{
    evaluate_cost, propagate_mean, run_ensemble, run_ensemble_with, solve, CostSource,
    EnsembleOptions, Error,
};

#[test]
fn deterministic_cost_identity_on_random_scenarios() {
    let mut rng = seeded(2024);
    let mut checked = 0;
    while checked < 50 {
        let s = random_deterministic(&mut rng);
        let (t, g) = match solve(&s) {
            Ok(v) => v,
            Err(Error::Singular { .. }) => continue,
            Err(e) => panic!("{e}"),
        };
        checked += 1;
        let mp = propagate_mean(&s, &g);
        for c in evaluate_cost(&s, &t, &g, CostSource::MeanPath(&mp)).unwrap() {
            let expected = t.alpha_bar[c.agent][0] * s.x0.mean.powi(2 * s.p as i32);
            assert!(
                rel(c.total, expected) <= 1e-9,
                "{} vs {}",
                c.total,
                expected
            );
            assert_eq!(c.predicted, expected);
        }
    }
}

#[test]
fn one_step_game_realized_cost() {
    let s = load("one_step_quartic.toml");
    let (t, g) = solve(&s).unwrap();
    let mp = propagate_mean(&s, &g);
    for c in evaluate_cost(&s, &t, &g, CostSource::MeanPath(&mp)).unwrap() {
        assert!((c.total - 83.0 / 81.0).abs() <= 1e-12);
    }
}

#[test]
fn exact_moment_costs_match_prediction() {
    for name in [
        "variance_aware_additive.toml",
        "multiplicative_noise.toml",
        "general_moment_quartic.toml",
    ] {
        let s = load(name);
        let (t, g) = solve(&s).unwrap();
        let mp = propagate_mean(&s, &g);
        for c in evaluate_cost(&s, &t, &g, CostSource::MeanPath(&mp)).unwrap() {
            assert!(rel(c.total, c.predicted) <= 1e-9, "{name}: {c:?}");
            let mean_part = c.running_mean + c.control_mean + c.terminal_mean;
            let expected = t.alpha_bar[c.agent][0] * s.x0.mean.powi(2 * s.p as i32);
            assert!(rel(mean_part, expected) <= 1e-9);
            let parts = mean_part + c.running_moment + c.control_moment + c.terminal_moment;
            assert!(rel(parts, c.total) <= 1e-12);
        }
    }
}

#[test]
fn additive_ensemble_variance_and_controls() {
    let s = load("variance_aware_additive.toml");
    let (t, g) = solve(&s).unwrap();
    let e = run_ensemble(&s, &g).unwrap();
    let mp = propagate_mean(&s, &g);
    let m = e.paths as f64;

    // Variance recursion var' = cl² var + σ², coded here on its own.
    let dg = g.dev_gain.as_ref().unwrap();
    let mut var = 0.0;
    for k in 0..=s.horizon {
        if k > 0 {
            let j = k - 1;
            let cl = s.a_bar[j] * (1.0 - dg[0][j] * s.b_bar[0][j] - dg[1][j] * s.b_bar[1][j]);
            let sigma = s.noise.as_ref().unwrap().sigma[j];
            var = cl * cl * var + sigma * sigma;
        }
        let se = var * (2.0 / m).sqrt();
        assert!(
            (e.empirical_variance[k] - var).abs() <= 5.0 * se + 1e-12,
            "step {k}"
        );
    }
    for i in 0..2 {
        for k in 0..s.horizon {
            let gap = (e.control_mean[i][k] - mp.u_bar[i][k]).abs();
            assert!(gap <= 5.0 * e.control_std_error[i][k] + 1e-12);
        }
    }
    for c in evaluate_cost(&s, &t, &g, CostSource::Ensemble(&mp, &e)).unwrap() {
        assert!((c.total - c.predicted).abs() <= 3.0 * c.std_error, "{c:?}");
    }
}

#[test]
fn cost_confidence_interval_coverage_over_seeds() {
    let s = load("variance_aware_additive.toml");
    let (t, g) = solve(&s).unwrap();
    let mp = propagate_mean(&s, &g);
    let mut covered = 0;
    let mut total = 0;
    for seed in 0..20 {
        let e = run_ensemble_with(&s, &g, 10_000, seed, EnsembleOptions::default()).unwrap();
        for c in evaluate_cost(&s, &t, &g, CostSource::Ensemble(&mp, &e)).unwrap() {
            total += 1;
            if (c.total - c.predicted).abs() <= 2.576 * c.std_error {
                covered += 1;
            }
        }
    }
    assert!(covered as f64 >= 0.95 * total as f64, "{covered}/{total}");
}

#[test]
fn multiplicative_noise_without_initial_deviation_stays_on_the_mean() {
    let mut s = load("multiplicative_noise.toml");
    s.x0.value = None;
    let (_, g) = solve(&s).unwrap();
    let e = run_ensemble_with(&s, &g, 500, 3, EnsembleOptions::default()).unwrap();
    assert!(e.empirical_variance.iter().all(|&v| v == 0.0));
    assert!(exact_moment_path(&s, &g).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn multiplicative_example_matches_moment_propagation() {
    let s = load("multiplicative_noise.toml");
    let (t, g) = solve(&s).unwrap();
    let e = run_ensemble(&s, &g).unwrap();
    let mp = propagate_mean(&s, &g);
    for c in evaluate_cost(&s, &t, &g, CostSource::Ensemble(&mp, &e)).unwrap() {
        assert!((c.total - c.predicted).abs() <= 4.0 * c.std_error, "{c:?}");
    }
}

#[test]
fn same_seed_same_ensemble() {
    let s = load("general_moment_quartic.toml");
    let (_, g) = solve(&s).unwrap();
    let a = run_ensemble_with(&s, &g, 5000, 9, EnsembleOptions::default()).unwrap();
    let b = run_ensemble_with(&s, &g, 5000, 9, EnsembleOptions::default()).unwrap();
    assert_eq!(a, b);
    let c = run_ensemble_with(&s, &g, 5000, 10, EnsembleOptions::default()).unwrap();
    assert_ne!(a.empirical_mean, c.empirical_mean);
}
