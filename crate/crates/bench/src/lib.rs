//! Fixtures for the benchmarks.

use mftg_core::scenario::{NoiseKind, NoiseSpec};
use mftg_core::{Family, InitialLaw, MonteCarloConfig, Scenario, Weights};

fn weights(agents: usize, horizon: usize) -> Weights {
    Weights {
        q: (0..agents).map(|i| vec![1.0 + i as f64; horizon]).collect(),
        q_terminal: (0..agents).map(|i| 1.0 + i as f64).collect(),
        r: (0..agents)
            .map(|i| vec![2.0 + 0.5 * i as f64; horizon])
            .collect(),
    }
}

/// `agents` players with alternating-sign inputs over `horizon` steps.
pub fn game(family: Family, agents: usize, horizon: usize, p: u32) -> Scenario {
    let stochastic = family.is_stochastic();
    Scenario {
        name: Some(format!("bench-{}-{agents}x{horizon}", family.config_name())),
        family,
        agents,
        horizon,
        p,
        o: None,
        a_bar: vec![1.0; horizon],
        b_bar: (0..agents)
            .map(|i| {
                let b = 0.5 + 0.25 * i as f64;
                vec![if i % 2 == 0 { b } else { -b }; horizon]
            })
            .collect(),
        deviation_dynamics: None,
        mean_weights: weights(agents, horizon),
        dev_weights: stochastic.then(|| weights(agents, horizon)),
        noise: stochastic.then(|| NoiseSpec {
            kind: NoiseKind::Gaussian,
            sigma: vec![1.0; horizon],
            moments: None,
        }),
        x0: InitialLaw::deterministic(2.0),
        mc: MonteCarloConfig {
            paths: 10_000,
            seed: 42,
            ..MonteCarloConfig::default()
        },
    }
}
