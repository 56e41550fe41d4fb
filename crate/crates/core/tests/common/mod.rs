#![allow(dead_code)]

use std::path::PathBuf;

use mftg_core::scenario::{DeviationDynamics, NoiseKind, NoiseSpec};
use mftg_core::{load_scenario, Family, InitialLaw, MonteCarloConfig, Scenario, Weights};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

pub fn load(name: &str) -> Scenario {
    let text = std::fs::read_to_string(scenario_path(name)).expect("scenario file");
    load_scenario(&text).expect("valid scenario")
}

/// Raw draws for a scenario; turned into a `Scenario` per family.
#[derive(Debug, Clone)]
pub struct Draw {
    pub agents: usize,
    pub horizon: usize,
    pub p: u32,
    pub o: u32,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<Vec<f64>>,
    pub a: Vec<f64>,
    pub b: Vec<Vec<f64>>,
    pub mean_w: (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>),
    pub dev_w: (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>),
    pub sigma: Vec<f64>,
    pub x0: f64,
}

fn nonzero(lo: f64, hi: f64) -> impl Strategy<Value = f64> + Clone {
    (lo..hi, any::<bool>()).prop_map(|(m, neg)| if neg { -m } else { m })
}

fn table(
    agents: usize,
    n: usize,
    s: impl Strategy<Value = f64> + Clone,
) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(s, n), agents)
}

fn weights(
    agents: usize,
    n: usize,
) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    (
        table(agents, n, 0.5..5.0f64),
        prop::collection::vec(0.5..5.0f64, agents),
        table(agents, n, 0.5..5.0f64),
    )
}

pub fn draw_strategy(
    max_agents: usize,
    max_horizon: usize,
    max_p: u32,
) -> impl Strategy<Value = Draw> {
    (1..=max_agents, 1..=max_horizon, 1..=max_p, 1..=3u32).prop_flat_map(|(agents, n, p, o)| {
        (
            prop::collection::vec(0.5..1.5f64, n),
            table(agents, n, nonzero(0.1, 3.0)),
            prop::collection::vec(0.3..1.2f64, n),
            table(agents, n, nonzero(0.1, 2.0)),
            weights(agents, n),
            weights(agents, n),
            prop::collection::vec(0.0..1.5f64, n),
            -5.0..5.0f64,
        )
            .prop_map(move |(a_bar, b_bar, a, b, mean_w, dev_w, sigma, x0)| Draw {
                agents,
                horizon: n,
                p,
                o,
                a_bar,
                b_bar,
                a,
                b,
                mean_w,
                dev_w,
                sigma,
                x0,
            })
    })
}

impl Draw {
    pub fn scenario(&self, family: Family) -> Scenario {
        let w = |t: &(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)| Weights {
            q: t.0.clone(),
            q_terminal: t.1.clone(),
            r: t.2.clone(),
        };
        let stochastic = family.is_stochastic();
        let general = family == Family::GeneralMoment2o2p;
        Scenario {
            name: None,
            family,
            agents: self.agents,
            horizon: self.horizon,
            p: self.p,
            o: general.then_some(self.o),
            a_bar: self.a_bar.clone(),
            b_bar: self.b_bar.clone(),
            deviation_dynamics: general.then(|| DeviationDynamics {
                a: self.a.clone(),
                b: self.b.clone(),
            }),
            mean_weights: w(&self.mean_w),
            dev_weights: stochastic.then(|| w(&self.dev_w)),
            noise: stochastic.then(|| NoiseSpec {
                kind: NoiseKind::Gaussian,
                sigma: self.sigma.clone(),
                moments: None,
            }),
            x0: InitialLaw::deterministic(self.x0),
            mc: MonteCarloConfig::default(),
        }
    }
}

/// Deterministic scenarios drawn from a seeded generator.
pub fn random_deterministic(rng: &mut ChaCha8Rng) -> Scenario {
    let agents = rng.random_range(1..=4);
    let n = rng.random_range(1..=12);
    let p = rng.random_range(1..=4);
    let nz = |rng: &mut ChaCha8Rng| {
        let m = rng.random_range(0.1..3.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    };
    let tab = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<Vec<f64>> {
        (0..agents)
            .map(|_| (0..n).map(|_| rng.random_range(lo..hi)).collect())
            .collect()
    };
    let a_bar = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let b_bar = (0..agents)
        .map(|_| (0..n).map(|_| nz(rng)).collect())
        .collect();
    let q = tab(rng, 0.5, 5.0);
    let r = tab(rng, 0.5, 5.0);
    let q_terminal = (0..agents).map(|_| rng.random_range(0.5..5.0)).collect();
    Scenario {
        name: None,
        family: Family::Deterministic2p,
        agents,
        horizon: n,
        p,
        o: None,
        a_bar,
        b_bar,
        deviation_dynamics: None,
        mean_weights: Weights { q, q_terminal, r },
        dev_weights: None,
        noise: None,
        x0: InitialLaw::deterministic(rng.random_range(-5.0..5.0)),
        mc: MonteCarloConfig::default(),
    }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel(x: f64, y: f64) -> f64 {
    (x - y).abs() / x.abs().max(y.abs()).max(1e-300)
}
