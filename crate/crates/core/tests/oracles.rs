mod common;

use common::{load, rel, seeded};
use mftg_core::recursion::solve_general_moment_with;
use mftg_core::scenario::{DeviationDynamics, NoiseKind, NoiseSpec};
use mftg_core::verify::{
    default_probes, random_convexity_draws, scalar_riccati, PerturbationMode, Probe,
};
use mftg_core::{
    bellman_identity_check, brute_force_one_step, lq_reduction_check, solve,
    unilateral_deviation_test, Error, Family, GridSpec, InitialLaw, MomentRecursionForm,
    MonteCarloConfig, OneStepInstance, Scenario, Weights,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn one_step(family: Family, rng: &mut ChaCha8Rng) -> Scenario {
    let agents = rng.random_range(1..=3);
    let mut nz = |lo: f64, hi: f64| {
        let m = rng.random_range(lo..hi);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    };
    let a_bar = vec![nz(0.1, 3.0)];
    let b_bar: Vec<Vec<f64>> = (0..agents).map(|_| vec![nz(0.1, 3.0)]).collect();
    let a = vec![nz(0.1, 3.0)];
    let b: Vec<Vec<f64>> = (0..agents).map(|_| vec![nz(0.1, 3.0)]).collect();
    let mut w = || {
        let q = (0..agents)
            .map(|_| vec![rng.random_range(0.5..5.0)])
            .collect();
        let qt = (0..agents).map(|_| rng.random_range(0.5..5.0)).collect();
        let r = (0..agents)
            .map(|_| vec![rng.random_range(0.5..5.0)])
            .collect();
        Weights {
            q,
            q_terminal: qt,
            r,
        }
    };
    let (mean_weights, dev_weights) = (w(), w());
    let p = rng.random_range(1..=3);
    let o = rng.random_range(1..=3);
    let sigma = rng.random_range(0.2..1.5);
    let stochastic = family.is_stochastic();
    let general = family == Family::GeneralMoment2o2p;
    Scenario {
        name: None,
        family,
        agents,
        horizon: 1,
        p,
        o: general.then_some(o),
        a_bar,
        b_bar,
        deviation_dynamics: general.then_some(DeviationDynamics { a, b }),
        mean_weights,
        dev_weights: stochastic.then_some(dev_weights),
        noise: stochastic.then(|| NoiseSpec {
            kind: NoiseKind::Gaussian,
            sigma: vec![sigma],
            moments: None,
        }),
        x0: InitialLaw::deterministic(1.0),
        mc: MonteCarloConfig::default(),
    }
}

fn unit_one_step(family: Family) -> Scenario {
    let unit = Weights {
        q: vec![vec![1.0]],
        q_terminal: vec![1.0],
        r: vec![vec![1.0]],
    };
    Scenario {
        name: None,
        family,
        agents: 1,
        horizon: 1,
        p: 1,
        o: (family == Family::GeneralMoment2o2p).then_some(1),
        a_bar: vec![1.0],
        b_bar: vec![vec![1.0]],
        deviation_dynamics: (family == Family::GeneralMoment2o2p).then(|| DeviationDynamics {
            a: vec![1.0],
            b: vec![vec![1.0]],
        }),
        mean_weights: unit.clone(),
        dev_weights: Some(unit),
        noise: Some(NoiseSpec {
            kind: NoiseKind::Gaussian,
            sigma: vec![1.0],
            moments: None,
        }),
        x0: InitialLaw::deterministic(1.0),
        mc: MonteCarloConfig::default(),
    }
}

#[test]
fn hand_derived_one_step_game() {
    let s = load("one_step_quartic.toml");
    let (table, gains) = solve(&s).unwrap();
    let bf = brute_force_one_step(&OneStepInstance::from_one_step_scenario(&s).unwrap()).unwrap();
    assert!(bf.converged);
    for i in 0..2 {
        assert!((gains.mean_gain[i][0] - 1.0 / 3.0).abs() <= 1e-12);
        assert!((table.alpha_bar[i][0] - 83.0 / 81.0).abs() <= 1e-12);
        assert!((bf.mean_gain[i] - 1.0 / 3.0).abs() <= 1e-8);
        assert!((bf.mean_value[i] - 83.0 / 81.0).abs() <= 1e-8);
    }
}

#[test]
fn brute_force_scalar_lq_values() {
    let bf = brute_force_one_step(
        &OneStepInstance::from_one_step_scenario(&unit_one_step(Family::AdditiveVariance2p))
            .unwrap(),
    )
    .unwrap();
    assert!((bf.dev_gain.as_ref().unwrap()[0] - 0.5).abs() < 1e-10);
    assert!((bf.dev_value.as_ref().unwrap()[0] - 1.5).abs() < 1e-10);
    assert_eq!(bf.dev_constant.as_ref().unwrap()[0], 1.0);

    let bf = brute_force_one_step(
        &OneStepInstance::from_one_step_scenario(&unit_one_step(Family::MultiplicativeVariance2p))
            .unwrap(),
    )
    .unwrap();
    assert!((bf.dev_value.as_ref().unwrap()[0] - 2.5).abs() < 1e-10);

    let s = unit_one_step(Family::GeneralMoment2o2p);
    let bf = brute_force_one_step(&OneStepInstance::from_one_step_scenario(&s).unwrap()).unwrap();
    assert!((bf.dev_gain.as_ref().unwrap()[0] - 0.5).abs() < 1e-10);
    assert!((bf.dev_value.as_ref().unwrap()[0] - 1.5).abs() < 1e-10);
}

#[test]
fn brute_force_agrees_with_closed_form_on_random_instances() {
    for (f, family) in [
        Family::Deterministic2p,
        Family::AdditiveVariance2p,
        Family::MultiplicativeVariance2p,
        Family::GeneralMoment2o2p,
    ]
    .into_iter()
    .enumerate()
    {
        let mut rng = seeded(100 + f as u64);
        let mut compared = 0;
        while compared < 50 {
            let s = one_step(family, &mut rng);
            let (table, gains) = match solve(&s) {
                Ok(v) => v,
                Err(Error::Singular { .. }) => continue,
                Err(e) => panic!("{e}"),
            };
            compared += 1;
            let bf = brute_force_one_step(&OneStepInstance::from_one_step_scenario(&s).unwrap())
                .unwrap();
            assert!(bf.converged, "{family:?}: {:?}", bf.notes);
            for i in 0..s.agents {
                let g = gains.mean_gain[i][0];
                assert!(
                    (bf.mean_gain[i] - g).abs() <= 1e-6 * (1.0 + g.abs()),
                    "{family:?} {s:?}"
                );
                assert!(rel(bf.mean_value[i], table.alpha_bar[i][0]) <= 1e-6);
                if let Some(dg) = &gains.dev_gain {
                    let g = dg[i][0];
                    let b = bf.dev_gain.as_ref().unwrap()[i];
                    assert!((b - g).abs() <= 1e-6 * (1.0 + g.abs()), "{family:?} {s:?}");
                    let alpha = table.alpha.as_ref().unwrap()[i][0];
                    assert!(rel(bf.dev_value.as_ref().unwrap()[i], alpha) <= 1e-6);
                }
                if let Some(gamma) = &table.gamma_bar {
                    assert!(rel(bf.dev_constant.as_ref().unwrap()[i], gamma[i][0]) <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn riccati_reduction_for_single_agent() {
    let mut rng = seeded(3);
    for _ in 0..40 {
        let n = rng.random_range(1..=50);
        let mut s = common::random_deterministic(&mut rng);
        s.agents = 1;
        s.p = 1;
        s.horizon = n;
        s.a_bar = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        s.b_bar = vec![(0..n).map(|_| rng.random_range(-3.0..3.0)).collect()];
        s.mean_weights = Weights {
            q: vec![(0..n).map(|_| rng.random_range(0.5..5.0)).collect()],
            q_terminal: vec![rng.random_range(0.5..5.0)],
            r: vec![(0..n).map(|_| rng.random_range(0.5..5.0)).collect()],
        };
        let (t, g) = solve(&s).unwrap();
        let lq = lq_reduction_check(&s, &t, &g).unwrap();
        assert!(lq.riccati_compared && lq.passed, "{}", lq.max_discrepancy);
    }
}

#[test]
fn riccati_textbook_instance() {
    let mut s = load("one_step_quartic.toml");
    s.agents = 1;
    s.p = 1;
    s.horizon = 5;
    s.a_bar = vec![1.1; 5];
    s.b_bar = vec![vec![1.0; 5]];
    s.mean_weights = Weights {
        q: vec![vec![1.0; 5]],
        q_terminal: vec![1.0],
        r: vec![vec![1.0; 5]],
    };
    let (t, _) = solve(&s).unwrap();
    let p = scalar_riccati(&[1.1; 5], &[1.0; 5], &[1.0; 5], &[1.0; 5], 1.0);
    for (x, y) in p.iter().zip(&t.alpha_bar[0]) {
        assert!(rel(*x, *y) <= 1e-12);
    }
}

#[test]
fn lq_check_symmetric_stochastic_and_precondition() {
    let mut s = load("variance_aware_additive.toml");
    s.p = 1;
    s.b_bar = vec![vec![1.2; 10]; 2];
    let w = Weights {
        q: vec![vec![2.0; 10]; 2],
        q_terminal: vec![2.0; 2],
        r: vec![vec![3.0; 10]; 2],
    };
    s.mean_weights = w.clone();
    s.dev_weights = Some(w);
    let (t, g) = solve(&s).unwrap();
    let lq = lq_reduction_check(&s, &t, &g).unwrap();
    assert!(lq.deviation_gains_compared && lq.passed);

    let s = load("higher_order_deterministic.toml");
    let (t, g) = solve(&s).unwrap();
    assert!(matches!(
        lq_reduction_check(&s, &t, &g),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn bellman_identity_for_every_family() {
    let probes = default_probes(32, 5);
    for name in [
        "higher_order_deterministic.toml",
        "variance_aware_additive.toml",
        "multiplicative_noise.toml",
        "general_moment_quartic.toml",
    ] {
        let s = load(name);
        let (t, g) = solve(&s).unwrap();
        for k in 0..s.horizon {
            let r = bellman_identity_check(&s, &t, &g, k, &probes).unwrap();
            assert!(r <= 1e-10, "{name} step {k}: {r}");
        }
    }
}

#[test]
fn bellman_isolates_gamma_recursion() {
    let s = load("variance_aware_additive.toml");
    let (t, g) = solve(&s).unwrap();
    let probe = [Probe {
        mean: 0.0,
        moment: 0.0,
    }];
    let gamma = t.gamma_bar.as_ref().unwrap();
    let alpha = t.alpha.as_ref().unwrap();
    for k in 0..s.horizon {
        assert!(bellman_identity_check(&s, &t, &g, k, &probe).unwrap() <= 1e-15);
        for i in 0..2 {
            assert!(rel(gamma[i][k] - gamma[i][k + 1], alpha[i][k + 1]) <= 1e-12);
        }
    }
}

#[test]
fn bellman_arbiter_picks_moment_factor_form() {
    let s = load("general_moment_quartic.toml");
    assert_eq!(s.o, Some(2));
    let probes = default_probes(32, 9);
    let worst = |form| {
        let (t, g) = solve_general_moment_with(&s, form).unwrap();
        (0..s.horizon)
            .map(|k| bellman_identity_check(&s, &t, &g, k, &probes).unwrap())
            .fold(0.0, f64::max)
    };
    let with_factor = worst(MomentRecursionForm::WithMomentFactor);
    let as_printed = worst(MomentRecursionForm::AsPrinted);
    assert!(with_factor <= 1e-10);
    assert!(as_printed > 1e-10);
    assert_eq!(
        MomentRecursionForm::default(),
        MomentRecursionForm::WithMomentFactor
    );
}

#[test]
fn deviation_test_on_one_step_game() {
    let s = load("one_step_quartic.toml");
    let (_, g) = solve(&s).unwrap();
    let out = unilateral_deviation_test(&s, &g, 0, &GridSpec::default()).unwrap();
    assert!(out.passed());
    assert!(out.margin() <= 1e-12);
    for p in &out.probes {
        assert_eq!(p.best_factor, 1.0);
    }
}

#[test]
fn corrupted_gain_is_detected() {
    let s = load("higher_order_deterministic.toml");
    let (_, mut g) = solve(&s).unwrap();
    g.mean_gain[0].iter_mut().for_each(|v| *v *= 1.2);
    let out = unilateral_deviation_test(&s, &g, 0, &GridSpec::default()).unwrap();
    assert!(!out.passed());
    let worst = out.worst().unwrap();
    assert!(worst.margin > 0.0);
    assert_eq!(worst.mode, PerturbationMode::Uniform);
}

#[test]
fn zero_input_gives_zero_margin() {
    let mut s = load("higher_order_deterministic.toml");
    s.b_bar = vec![vec![0.0; 7]; 2];
    let (_, g) = solve(&s).unwrap();
    for i in 0..2 {
        let out = unilateral_deviation_test(&s, &g, i, &GridSpec::default()).unwrap();
        assert_eq!(out.margin(), 0.0);
    }
}

#[test]
fn stage_convexity_on_random_draws() {
    let min = random_convexity_draws(1000, 11).unwrap();
    assert!(min > 0.0);
}
