//! Forward simulation under the equilibrium feedback: the exact mean path,
//! seeded Monte Carlo ensembles, and realized costs.
//!
//! Path `m` draws its randomness from `ChaCha8Rng::seed_from_u64(seed)` with
//! the stream set to `m`: first the initial state (when the initial law is
//! random), then one noise value per transition. Paths are processed in fixed
//! chunks and the chunk results are reduced in path order, so the output does
//! not depend on the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::noise_even_moment;
use crate::recursion::{CoefficientTable, GainSchedule};
use crate::scenario::{Family, InitialKind, NoiseKind, Scenario};

const CHUNK: u64 = 1024;

/// Mean state `x̄_k` (`k = 0..=N`) and mean controls `ū_ik` (`[agent][k]`, `k < N`).
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPath {
    pub x_bar: Vec<f64>,
    pub u_bar: Vec<Vec<f64>>,
}

/// Propagates the mean state under `ū_ik = -ḡ_ik ā_k x̄_k`.
pub fn propagate_mean(s: &Scenario, gains: &GainSchedule) -> MeanPath {
    let n = s.horizon;
    let mut x_bar = Vec::with_capacity(n + 1);
    let mut u_bar = vec![Vec::with_capacity(n); s.agents];
    let mut x = s.x0.mean;
    x_bar.push(x);
    for k in 0..n {
        let a = s.a_bar[k];
        let mut next = a * x;
        for (i, u_row) in u_bar.iter_mut().enumerate() {
            let u = -gains.mean_gain[i][k] * a * x;
            u_row.push(u);
            next += s.b_bar[i][k] * u;
        }
        x = next;
        x_bar.push(x);
    }
    MeanPath { x_bar, u_bar }
}

/// Limits on what an ensemble run may keep in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnsembleOptions {
    /// Trajectories are kept only for at most this many paths.
    pub storage_cap: u64,
    /// Upper bound in bytes for stored trajectories.
    pub memory_budget: u64,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            storage_cap: 100_000,
            memory_budget: 1 << 30,
        }
    }
}

/// Stored per-path data.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectories {
    /// `states[m][k]`, `k = 0..=N`.
    pub states: Vec<Vec<f64>>,
    /// `controls[m][i][k]`, `k < N`.
    pub controls: Vec<Vec<Vec<f64>>>,
}

/// Monte Carlo estimate of one agent's deviation-channel cost, with moments
/// taken about the model mean `x̄_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationCost {
    pub running: f64,
    pub control: f64,
    pub terminal: f64,
    /// Standard error of the per-path total.
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub seed: u64,
    pub paths: u64,
    /// Order of `empirical_moment`: the family's moment order.
    pub moment_order: u32,
    pub trajectories: Option<Trajectories>,
    /// Per step `k = 0..=N`.
    pub empirical_mean: Vec<f64>,
    /// Central moments about the empirical mean.
    pub empirical_variance: Vec<f64>,
    pub empirical_moment: Vec<f64>,
    /// `[agent][k]`.
    pub control_mean: Vec<Vec<f64>>,
    pub control_std_error: Vec<Vec<f64>>,
    pub deviation_cost: Vec<DeviationCost>,
}

/// Random inputs of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathDraws {
    pub x0: f64,
    /// `eps[k]` is `ε_{k+1}`, applied in the transition `k → k+1`.
    pub eps: Vec<f64>,
}

fn rng_for(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Draws the initial state and noise sequence of path `path`.
pub fn draw_path(s: &Scenario, seed: u64, path: u64) -> Result<PathDraws> {
    let noise = s
        .noise
        .as_ref()
        .ok_or_else(|| Error::Precondition("simulation needs a noise specification".into()))?;
    if noise.kind == NoiseKind::ExplicitMoments {
        return Err(Error::Precondition(
            "explicit-moments noise has no sampling law; give a gaussian, rademacher or uniform kind to simulate".into(),
        ));
    }
    let mut rng = rng_for(seed, path);
    let x0 = match s.x0.kind {
        InitialKind::Deterministic => s.x0.atom(),
        InitialKind::GaussianAroundMean => {
            let z: f64 = rng.sample(StandardNormal);
            s.x0.mean + s.x0.variance.sqrt() * z
        }
        InitialKind::EmpiricalSamples => {
            let samples = s.x0.samples.as_deref().unwrap_or_default();
            let idx = rng.random_range(0..samples.len());
            samples[idx] + s.x0.sample_offset()
        }
    };
    let eps = noise
        .sigma
        .iter()
        .take(s.horizon)
        .map(|&sigma| match noise.kind {
            NoiseKind::Gaussian => sigma * rng.sample::<f64, _>(StandardNormal),
            NoiseKind::Rademacher => {
                if rng.random::<bool>() {
                    sigma
                } else {
                    -sigma
                }
            }
            NoiseKind::Uniform => sigma * 3f64.sqrt() * rng.random_range(-1.0..=1.0),
            NoiseKind::ExplicitMoments => unreachable!(),
        })
        .collect();
    Ok(PathDraws { x0, eps })
}

/// Runs one path under the feedback law given by `gains` around `mean`.
/// Writes `x_k` into `states` and `u_ik` into `controls[i][k]`.
pub fn simulate_path(
    s: &Scenario,
    gains: &GainSchedule,
    mean: &MeanPath,
    draws: &PathDraws,
    states: &mut [f64],
    controls: &mut [Vec<f64>],
) {
    let dev_gain = gains
        .dev_gain
        .as_ref()
        .expect("stochastic gain schedule carries deviation gains");
    let mut x = draws.x0;
    states[0] = x;
    for k in 0..s.horizon {
        let d = x - mean.x_bar[k];
        let drift = s.deviation_drift(k);
        let mut channel = drift * d;
        for i in 0..s.agents {
            let du = -dev_gain[i][k] * drift * d;
            controls[i][k] = mean.u_bar[i][k] + du;
            channel += s.deviation_input(i, k) * du;
        }
        let eps = draws.eps[k];
        let dev_next = match s.family {
            Family::AdditiveVariance2p => channel + eps,
            Family::MultiplicativeVariance2p => channel + d * eps,
            Family::GeneralMoment2o2p => channel * eps,
            Family::Deterministic2p => channel,
        };
        x = mean.x_bar[k + 1] + dev_next;
        states[k + 1] = x;
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Acc {
    sum: f64,
    comp: f64,
}

impl Acc {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn merge(&mut self, other: &Acc) {
        self.add(other.sum);
        self.add(other.comp);
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Sums over a block of paths.
#[derive(Debug, Clone)]
struct Partial {
    /// `dev_pow[k][j-1] = Σ_m (x_k - x̄_k)^j`, `j = 1..=order`.
    dev_pow: Vec<Vec<Acc>>,
    /// `[agent][k]`: Σ δu and Σ δu².
    du: Vec<Vec<Acc>>,
    du2: Vec<Vec<Acc>>,
    /// `[agent]`: running, control, terminal, per-path total, per-path total².
    cost: Vec<[Acc; 5]>,
    states: Vec<Vec<f64>>,
    controls: Vec<Vec<Vec<f64>>>,
}

impl Partial {
    fn new(agents: usize, n: usize, order: usize) -> Self {
        Self {
            dev_pow: vec![vec![Acc::default(); order]; n + 1],
            du: vec![vec![Acc::default(); n]; agents],
            du2: vec![vec![Acc::default(); n]; agents],
            cost: vec![[Acc::default(); 5]; agents],
            states: Vec::new(),
            controls: Vec::new(),
        }
    }

    fn merge(&mut self, other: Partial) {
        for (a, b) in self.dev_pow.iter_mut().zip(&other.dev_pow) {
            for (x, y) in a.iter_mut().zip(b) {
                x.merge(y);
            }
        }
        for (a, b) in self.du.iter_mut().zip(&other.du) {
            for (x, y) in a.iter_mut().zip(b) {
                x.merge(y);
            }
        }
        for (a, b) in self.du2.iter_mut().zip(&other.du2) {
            for (x, y) in a.iter_mut().zip(b) {
                x.merge(y);
            }
        }
        for (a, b) in self.cost.iter_mut().zip(&other.cost) {
            for (x, y) in a.iter_mut().zip(b) {
                x.merge(y);
            }
        }
        self.states.extend(other.states);
        self.controls.extend(other.controls);
    }
}

/// Simulates `s.mc.paths` paths with the scenario's seed.
pub fn run_ensemble(s: &Scenario, gains: &GainSchedule) -> Result<Ensemble> {
    run_ensemble_with(s, gains, s.mc.paths, s.mc.seed, EnsembleOptions::default())
}

pub fn run_ensemble_with(
    s: &Scenario,
    gains: &GainSchedule,
    paths: u64,
    seed: u64,
    opts: EnsembleOptions,
) -> Result<Ensemble> {
    if !s.family.is_stochastic() {
        return Err(Error::Precondition(
            "the deterministic family has no ensemble; use the mean path".into(),
        ));
    }
    if paths == 0 {
        return Err(Error::Precondition(
            "ensemble needs at least one path".into(),
        ));
    }
    if gains.dev_gain.is_none() {
        return Err(Error::Precondition(
            "gain schedule has no deviation gains".into(),
        ));
    }
    let (agents, n) = (s.agents, s.horizon);
    let store = paths <= opts.storage_cap;
    if store {
        let per_path = ((n + 1) + agents * n) as u64 * 8;
        let bytes = per_path.saturating_mul(paths);
        if bytes > opts.memory_budget {
            return Err(Error::Resource(format!(
                "storing {paths} trajectories needs {bytes} bytes, budget is {}",
                opts.memory_budget
            )));
        }
    }
    // Surface sampling errors before going parallel.
    draw_path(s, seed, 0)?;

    let order = s.moment_order().max(2) as usize;
    let mean = propagate_mean(s, gains);
    let dev_w = s
        .dev_weights
        .as_ref()
        .ok_or_else(|| Error::Precondition("deviation weights missing".into()))?;
    let m_exp = s.moment_order() as i32;

    let chunks = paths.div_ceil(CHUNK);
    let partials: Vec<Partial> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut part = Partial::new(agents, n, order);
            let mut states = vec![0.0; n + 1];
            let mut controls = vec![vec![0.0; n]; agents];
            let start = chunk * CHUNK;
            let end = (start + CHUNK).min(paths);
            for path in start..end {
                let draws = draw_path(s, seed, path).expect("draws validated above");
                simulate_path(s, gains, &mean, &draws, &mut states, &mut controls);
                for k in 0..=n {
                    let d = states[k] - mean.x_bar[k];
                    let mut pow = 1.0;
                    for acc in part.dev_pow[k].iter_mut() {
                        pow *= d;
                        acc.add(pow);
                    }
                }
                for i in 0..agents {
                    let (mut running, mut control) = (0.0, 0.0);
                    for k in 0..n {
                        let du = controls[i][k] - mean.u_bar[i][k];
                        part.du[i][k].add(du);
                        part.du2[i][k].add(du * du);
                        running += dev_w.q[i][k] * (states[k] - mean.x_bar[k]).powi(m_exp);
                        control += dev_w.r[i][k] * du.powi(m_exp);
                    }
                    let terminal = dev_w.q_terminal[i] * (states[n] - mean.x_bar[n]).powi(m_exp);
                    let total = running + control + terminal;
                    let c = &mut part.cost[i];
                    c[0].add(running);
                    c[1].add(control);
                    c[2].add(terminal);
                    c[3].add(total);
                    c[4].add(total * total);
                }
                if store {
                    part.states.push(states.clone());
                    part.controls.push(controls.clone());
                }
            }
            part
        })
        .collect();

    let mut total = Partial::new(agents, n, order);
    for part in partials {
        total.merge(part);
    }
    Ok(summarize(s, &mean, total, paths, seed, store))
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// Central moment of order `n` about the empirical mean, from raw moments of
/// the deviation from the model mean.
fn central_from_raw(raw: &[f64], n: usize) -> f64 {
    let shift = raw[0];
    let mut total = (-shift).powi(n as i32);
    for j in 1..=n {
        total += binomial(n, j) * raw[j - 1] * (-shift).powi((n - j) as i32);
    }
    total
}

fn summarize(
    s: &Scenario,
    mean: &MeanPath,
    total: Partial,
    paths: u64,
    seed: u64,
    store: bool,
) -> Ensemble {
    let m = paths as f64;
    let moment_order = s.moment_order();
    let mut empirical_mean = Vec::new();
    let mut empirical_variance = Vec::new();
    let mut empirical_moment = Vec::new();
    for (k, sums) in total.dev_pow.iter().enumerate() {
        let raw: Vec<f64> = sums.iter().map(|a| a.value() / m).collect();
        empirical_mean.push(mean.x_bar[k] + raw[0]);
        empirical_variance.push(central_from_raw(&raw, 2).max(0.0));
        empirical_moment.push(central_from_raw(&raw, moment_order as usize).max(0.0));
    }
    let std_err = |sum: f64, sum2: f64| {
        if paths < 2 {
            return 0.0;
        }
        let avg = sum / m;
        let var = ((sum2 - m * avg * avg) / (m - 1.0)).max(0.0);
        (var / m).sqrt()
    };
    let control_mean = total
        .du
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(k, a)| mean.u_bar[i][k] + a.value() / m)
                .collect()
        })
        .collect();
    let control_std_error = total
        .du
        .iter()
        .zip(&total.du2)
        .map(|(r1, r2)| {
            r1.iter()
                .zip(r2)
                .map(|(a, b)| std_err(a.value(), b.value()))
                .collect()
        })
        .collect();
    let deviation_cost = total
        .cost
        .iter()
        .map(|c| DeviationCost {
            running: c[0].value() / m,
            control: c[1].value() / m,
            terminal: c[2].value() / m,
            std_error: std_err(c[3].value(), c[4].value()),
        })
        .collect();
    Ensemble {
        seed,
        paths,
        moment_order,
        trajectories: store.then_some(Trajectories {
            states: total.states,
            controls: total.controls,
        }),
        empirical_mean,
        empirical_variance,
        empirical_moment,
        control_mean,
        control_std_error,
        deviation_cost,
    }
}

/// Per-agent realized cost split into mean-channel and moment-channel parts.
#[derive(Debug, Clone, PartialEq)]
pub struct CostBreakdown {
    /// Zero-based agent index.
    pub agent: usize,
    pub running_mean: f64,
    pub running_moment: f64,
    pub control_mean: f64,
    pub control_moment: f64,
    pub terminal_mean: f64,
    pub terminal_moment: f64,
    pub total: f64,
    /// Equilibrium cost-to-go from the coefficient table.
    pub predicted: f64,
    /// Standard error of `total` (zero when computed exactly).
    pub std_error: f64,
}

/// Where the moment-channel terms come from.
#[derive(Debug, Clone, Copy)]
pub enum CostSource<'a> {
    /// Moments propagated exactly through the closed loop.
    MeanPath(&'a MeanPath),
    /// Moments estimated from an ensemble simulated around this mean path.
    Ensemble(&'a MeanPath, &'a Ensemble),
}

/// Realized cost of every agent under `gains`.
pub fn evaluate_cost(
    s: &Scenario,
    table: &CoefficientTable,
    gains: &GainSchedule,
    source: CostSource<'_>,
) -> Result<Vec<CostBreakdown>> {
    let mean = match source {
        CostSource::MeanPath(m) | CostSource::Ensemble(m, _) => m,
    };
    let exact_moments = match source {
        CostSource::MeanPath(_) if s.family.is_stochastic() => Some(exact_moment_path(s, gains)?),
        _ => None,
    };
    let n = s.horizon;
    let exp = 2 * s.p as i32;
    let m_exp = s.moment_order() as i32;
    let w = &s.mean_weights;
    (0..s.agents)
        .map(|i| {
            let running_mean: f64 = (0..n).map(|k| w.q[i][k] * mean.x_bar[k].powi(exp)).sum();
            let control_mean: f64 = (0..n).map(|k| w.r[i][k] * mean.u_bar[i][k].powi(exp)).sum();
            let terminal_mean = w.q_terminal[i] * mean.x_bar[n].powi(exp);
            let (running_moment, control_moment, terminal_moment, std_error) =
                match (source, &exact_moments, &s.dev_weights, &gains.dev_gain) {
                    (CostSource::Ensemble(_, e), _, _, _) => {
                        let c = &e.deviation_cost[i];
                        (c.running, c.control, c.terminal, c.std_error)
                    }
                    (_, Some(moments), Some(dw), Some(g)) => {
                        let running = (0..n).map(|k| dw.q[i][k] * moments[k]).sum();
                        let control = (0..n)
                            .map(|k| {
                                dw.r[i][k]
                                    * (g[i][k] * s.deviation_drift(k)).powi(m_exp)
                                    * moments[k]
                            })
                            .sum();
                        (running, control, dw.q_terminal[i] * moments[n], 0.0)
                    }
                    _ => (0.0, 0.0, 0.0, 0.0),
                };
            Ok(CostBreakdown {
                agent: i,
                running_mean,
                running_moment,
                control_mean,
                control_moment,
                terminal_mean,
                terminal_moment,
                total: running_mean
                    + running_moment
                    + control_mean
                    + control_moment
                    + terminal_mean
                    + terminal_moment,
                predicted: table.equilibrium_cost(s, i),
                std_error,
            })
        })
        .collect()
}

/// `E[(x_k - x̄_k)^m]` for `k = 0..=N` with `m` the family's moment order,
/// propagated exactly under the deviation feedback of `gains`.
pub fn exact_moment_path(s: &Scenario, gains: &GainSchedule) -> Result<Vec<f64>> {
    let order = s.moment_order();
    let noise = s
        .noise
        .as_ref()
        .ok_or_else(|| Error::Precondition("moment propagation needs noise".into()))?;
    let g = gains
        .dev_gain
        .as_ref()
        .ok_or_else(|| Error::Precondition("gain schedule has no deviation gains".into()))?;
    let mut out = Vec::with_capacity(s.horizon + 1);
    let mut moment = s.x0.central_moment(order);
    out.push(moment);
    for k in 0..s.horizon {
        let feedback: f64 = (0..s.agents)
            .map(|i| g[i][k] * s.deviation_input(i, k))
            .sum();
        let cl = s.deviation_drift(k) * (1.0 - feedback);
        let m = noise_even_moment(noise, k, order)?;
        moment = match s.family {
            Family::AdditiveVariance2p => cl * cl * moment + m,
            Family::MultiplicativeVariance2p => (cl * cl + m) * moment,
            _ => m * cl.powi(order as i32) * moment,
        };
        out.push(moment);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recursion::solve;
    use crate::scenario::load_scenario;

    const ADDITIVE: &str = r#"
family = "additive-variance"
agents = 2
horizon = 4
p = 2
[dynamics]
a_bar = 1
b_bar = [-2, 3]
[weights]
q_bar = [4, 5]
q_bar_terminal = [4, 5]
r_bar = [6, 7]
q = [4, 5]
q_terminal = [4, 5]
r = [6, 7]
[noise]
kind = "gaussian"
sigma = 1
[initial]
kind = "deterministic"
mean = 2
[monte_carlo]
paths = 3000
seed = 7
"#;

    #[test]
    fn one_step_mean_path() {
        let s = load_scenario(
            r#"
family = "deterministic"
agents = 2
horizon = 1
p = 2
[dynamics]
a_bar = 1
b_bar = 1
[weights]
q_bar = 1
q_bar_terminal = 1
r_bar = 1
[initial]
kind = "deterministic"
mean = 1
"#,
        )
        .unwrap();
        let (_, g) = solve(&s).unwrap();
        let mp = propagate_mean(&s, &g);
        assert!((mp.x_bar[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((mp.u_bar[0][0] + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_paths_follow_the_mean() {
        let s = load_scenario(&ADDITIVE.replace("sigma = 1", "sigma = 0")).unwrap();
        let (_, g) = solve(&s).unwrap();
        let mp = propagate_mean(&s, &g);
        let e = run_ensemble(&s, &g).unwrap();
        for path in &e.trajectories.as_ref().unwrap().states {
            assert_eq!(path, &mp.x_bar);
        }
        assert!(e.empirical_variance.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ensemble_is_reproducible_and_thread_independent() {
        let s = load_scenario(ADDITIVE).unwrap();
        let (_, g) = solve(&s).unwrap();
        let a = run_ensemble(&s, &g).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let b = pool.install(|| run_ensemble(&s, &g).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_statistics_match_stored_paths() {
        let s = load_scenario(ADDITIVE).unwrap();
        let (_, g) = solve(&s).unwrap();
        let e = run_ensemble(&s, &g).unwrap();
        let states = &e.trajectories.as_ref().unwrap().states;
        let m = states.len() as f64;
        for k in 0..=s.horizon {
            let avg = states.iter().map(|p| p[k]).sum::<f64>() / m;
            let var = states.iter().map(|p| (p[k] - avg).powi(2)).sum::<f64>() / m;
            assert!((avg - e.empirical_mean[k]).abs() < 1e-12 * (1.0 + avg.abs()));
            assert!((var - e.empirical_variance[k]).abs() < 1e-10 * (1.0 + var));
        }
    }

    #[test]
    fn storage_respects_budget() {
        let s = load_scenario(ADDITIVE).unwrap();
        let (_, g) = solve(&s).unwrap();
        let tight = EnsembleOptions {
            storage_cap: 100_000,
            memory_budget: 1000,
        };
        assert!(matches!(
            run_ensemble_with(&s, &g, 3000, 1, tight),
            Err(Error::Resource(_))
        ));
        let no_store = EnsembleOptions {
            storage_cap: 10,
            memory_budget: 1000,
        };
        assert!(run_ensemble_with(&s, &g, 3000, 1, no_store)
            .unwrap()
            .trajectories
            .is_none());
    }

    #[test]
    fn deterministic_family_has_no_ensemble() {
        let s = load_scenario(ADDITIVE).unwrap().deterministic_part();
        let (_, g) = solve(&s).unwrap();
        assert!(matches!(run_ensemble(&s, &g), Err(Error::Precondition(_))));
    }

    #[test]
    fn central_moments_from_raw() {
        // Deviations {1, 3}: mean 2, central moments 1 (order 2) and 1 (order 4).
        let raw = [2.0, 5.0, 14.0, 41.0];
        assert!((central_from_raw(&raw, 2) - 1.0).abs() < 1e-12);
        assert!((central_from_raw(&raw, 4) - 1.0).abs() < 1e-12);
    }
}
