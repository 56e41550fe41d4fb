//! Independent checks of a solved scenario.
//!
//! Nothing here reuses the recursion code: best responses are found by direct
//! minimization, the scalar Riccati recursion and the moment pushforward are
//! coded separately, and costs are recomputed by forward simulation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{convexity_scan, noise_even_moment};
use crate::recursion::{solve, stationarity_residual, CoefficientTable, GainSchedule};
use crate::scenario::{Family, Scenario};
use crate::simulate::{draw_path, exact_moment_path, propagate_mean, simulate_path, PathDraws};

pub const STATIONARITY_TOL: f64 = 1e-9;
pub const BELLMAN_TOL: f64 = 1e-10;
pub const SUBGAME_TOL: f64 = 1e-6;
pub const DETERMINISTIC_DEVIATION_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Unilateral deviation test
// ---------------------------------------------------------------------------

/// Multiplicative perturbations of one agent's gains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub points: usize,
    /// Perturbation factors span `1 ± span`.
    pub span: f64,
    /// Also perturb each step's gain on its own.
    pub per_step: bool,
    /// Monte Carlo paths for the deviation channel of stochastic families.
    pub paths: u64,
    pub seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points: 101,
            span: 0.2,
            per_step: true,
            paths: 2000,
            seed: 0,
        }
    }
}

impl GridSpec {
    pub fn factors(&self) -> Vec<f64> {
        if self.points <= 1 {
            return vec![1.0];
        }
        let half = (self.points - 1) as f64 / 2.0;
        (0..self.points)
            .map(|j| 1.0 + self.span * ((j as f64 - half) / half))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainChannel {
    /// Mean gains, cost computed exactly from the mean path.
    Mean,
    /// Deviation gains, cost computed by exact moment propagation.
    DeviationExact,
    /// Deviation gains, cost estimated by Monte Carlo with common random numbers.
    DeviationMonteCarlo,
}

impl GainChannel {
    pub fn label(self) -> &'static str {
        match self {
            GainChannel::Mean => "mean",
            GainChannel::DeviationExact => "deviation-exact",
            GainChannel::DeviationMonteCarlo => "deviation-mc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbationMode {
    /// Every step's gain scaled by the same factor.
    Uniform,
    /// Only the gain at this step scaled.
    Step(usize),
}

/// Best perturbation found for one (agent, channel, mode).
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationProbe {
    pub agent: usize,
    pub channel: GainChannel,
    pub mode: PerturbationMode,
    pub equilibrium_cost: f64,
    pub best_cost: f64,
    pub best_factor: f64,
    /// `equilibrium_cost - best_cost`.
    pub margin: f64,
    pub tolerance: f64,
    pub std_error: f64,
}

impl DeviationProbe {
    pub fn passed(&self) -> bool {
        self.margin <= self.tolerance
    }
}

/// Outcome of the deviation test for one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationOutcome {
    pub agent: usize,
    pub probes: Vec<DeviationProbe>,
}

impl DeviationOutcome {
    /// Largest margin over all probes.
    pub fn margin(&self) -> f64 {
        self.probes
            .iter()
            .map(|p| p.margin)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.probes.iter().all(DeviationProbe::passed)
    }

    pub fn worst(&self) -> Option<&DeviationProbe> {
        self.probes
            .iter()
            .max_by(|a, b| (a.margin - a.tolerance).total_cmp(&(b.margin - b.tolerance)))
    }
}

/// Mean-channel cost of agent `i` along the mean path of `gains`.
fn mean_channel_cost(s: &Scenario, gains: &GainSchedule, i: usize) -> f64 {
    let mp = propagate_mean(s, gains);
    let exp = 2 * s.p as i32;
    let w = &s.mean_weights;
    let n = s.horizon;
    let mut total = w.q_terminal[i] * mp.x_bar[n].powi(exp);
    for k in 0..n {
        total += w.q[i][k] * mp.x_bar[k].powi(exp) + w.r[i][k] * mp.u_bar[i][k].powi(exp);
    }
    total
}

/// Deviation-channel cost of agent `i` with exactly propagated moments.
fn exact_deviation_cost(s: &Scenario, gains: &GainSchedule, i: usize) -> Result<f64> {
    let moments = exact_moment_path(s, gains)?;
    let w = s.dev_weights.as_ref().expect("stochastic scenario");
    let g = gains.dev_gain.as_ref().expect("stochastic gains");
    let m = s.moment_order() as i32;
    let n = s.horizon;
    let mut total = w.q_terminal[i] * moments[n];
    for k in 0..n {
        total += (w.q[i][k] + w.r[i][k] * (g[i][k] * s.deviation_drift(k)).powi(m)) * moments[k];
    }
    Ok(total)
}

/// Per-path deviation-channel costs of agent `i` on fixed draws.
fn sampled_deviation_costs(
    s: &Scenario,
    gains: &GainSchedule,
    draws: &[PathDraws],
    i: usize,
) -> Vec<f64> {
    let mean = propagate_mean(s, gains);
    let w = s.dev_weights.as_ref().expect("stochastic scenario");
    let m = s.moment_order() as i32;
    let n = s.horizon;
    let mut states = vec![0.0; n + 1];
    let mut controls = vec![vec![0.0; n]; s.agents];
    draws
        .iter()
        .map(|d| {
            simulate_path(s, gains, &mean, d, &mut states, &mut controls);
            let mut cost = w.q_terminal[i] * (states[n] - mean.x_bar[n]).powi(m);
            for k in 0..n {
                cost += w.q[i][k] * (states[k] - mean.x_bar[k]).powi(m)
                    + w.r[i][k] * (controls[i][k] - mean.u_bar[i][k]).powi(m);
            }
            cost
        })
        .collect()
}

fn mean_and_std_error(samples: &[f64]) -> (f64, f64) {
    let m = samples.len() as f64;
    let avg = samples.iter().sum::<f64>() / m;
    if samples.len() < 2 {
        return (avg, 0.0);
    }
    let var = samples.iter().map(|v| (v - avg).powi(2)).sum::<f64>() / (m - 1.0);
    (avg, (var / m).sqrt())
}

fn scaled(
    gains: &GainSchedule,
    channel: GainChannel,
    i: usize,
    mode: PerturbationMode,
    f: f64,
) -> GainSchedule {
    let mut out = gains.clone();
    let row = match channel {
        GainChannel::Mean => &mut out.mean_gain[i],
        _ => &mut out.dev_gain.as_mut().expect("stochastic gains")[i],
    };
    match mode {
        PerturbationMode::Uniform => row.iter_mut().for_each(|g| *g *= f),
        PerturbationMode::Step(k) => row[k] *= f,
    }
    out
}

/// Scans multiplicative perturbations of agent `i`'s gains with every other
/// agent held at `gains`, and reports the largest cost decrease found.
pub fn unilateral_deviation_test(
    s: &Scenario,
    gains: &GainSchedule,
    i: usize,
    grid: &GridSpec,
) -> Result<DeviationOutcome> {
    if i >= s.agents {
        return Err(Error::Precondition(format!("agent {} out of range", i + 1)));
    }
    let factors = grid.factors();
    let mut modes = vec![PerturbationMode::Uniform];
    if grid.per_step {
        modes.extend((0..s.horizon).map(PerturbationMode::Step));
    }
    let mut channels = vec![GainChannel::Mean];
    if s.family.is_stochastic() {
        channels.push(GainChannel::DeviationExact);
        if grid.paths > 0 {
            channels.push(GainChannel::DeviationMonteCarlo);
        }
    }
    let draws = if channels.contains(&GainChannel::DeviationMonteCarlo) {
        (0..grid.paths)
            .map(|m| draw_path(s, grid.seed, m))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let cost = |g: &GainSchedule, channel: GainChannel| -> Result<(f64, f64)> {
        match channel {
            GainChannel::Mean => Ok((mean_channel_cost(s, g, i), 0.0)),
            GainChannel::DeviationExact => Ok((exact_deviation_cost(s, g, i)?, 0.0)),
            GainChannel::DeviationMonteCarlo => Ok(mean_and_std_error(&sampled_deviation_costs(
                s, g, &draws, i,
            ))),
        }
    };

    let mut probes = Vec::new();
    for &channel in &channels {
        let (eq, se) = cost(gains, channel)?;
        let tolerance = match channel {
            GainChannel::DeviationMonteCarlo => 3.0 * se + DETERMINISTIC_DEVIATION_TOL * eq.abs(),
            _ => DETERMINISTIC_DEVIATION_TOL * eq.abs(),
        };
        for &mode in &modes {
            let costs = factors
                .par_iter()
                .map(|&f| cost(&scaled(gains, channel, i, mode, f), channel).map(|c| c.0))
                .collect::<Result<Vec<_>>>()?;
            let (best_idx, best_cost) =
                costs
                    .iter()
                    .copied()
                    .enumerate()
                    .fold(
                        (0, f64::INFINITY),
                        |acc, (j, c)| if c < acc.1 { (j, c) } else { acc },
                    );
            probes.push(DeviationProbe {
                agent: i,
                channel,
                mode,
                equilibrium_cost: eq,
                best_cost,
                best_factor: factors[best_idx],
                margin: eq - best_cost,
                tolerance,
                std_error: se,
            });
        }
    }
    Ok(DeviationOutcome { agent: i, probes })
}

/// Deterministic family only: replaces agent `i`'s feedback by its
/// equilibrium open-loop control sequence plus random offsets, with the other
/// agents kept on their feedback laws. Returns the largest cost decrease found.
pub fn open_loop_jitter_test(
    s: &Scenario,
    gains: &GainSchedule,
    i: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if s.family != Family::Deterministic2p {
        return Err(Error::Precondition(
            "open-loop jitter test applies to the deterministic family".into(),
        ));
    }
    let eq_path = propagate_mean(s, gains);
    let run = |offsets: &[f64]| -> f64 {
        let exp = 2 * s.p as i32;
        let w = &s.mean_weights;
        let mut x = s.x0.mean;
        let mut cost = 0.0;
        for k in 0..s.horizon {
            let a = s.a_bar[k];
            let mut next = a * x;
            for j in 0..s.agents {
                let u = if j == i {
                    eq_path.u_bar[i][k] + offsets[k]
                } else {
                    -gains.mean_gain[j][k] * a * x
                };
                next += s.b_bar[j][k] * u;
                if j == i {
                    cost += w.r[i][k] * u.powi(exp);
                }
            }
            cost += w.q[i][k] * x.powi(exp);
            x = next;
        }
        cost + w.q_terminal[i] * x.powi(exp)
    };
    let eq = run(&vec![0.0; s.horizon]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::INFINITY;
    for d in 0..draws {
        // Jitter sizes from 1e-4 to 1e-1 of the control scale.
        let size = 10f64.powf(-4.0 + 3.0 * d as f64 / draws.max(1) as f64);
        let offsets: Vec<f64> = (0..s.horizon)
            .map(|k| size * (1.0 + eq_path.u_bar[i][k].abs()) * rng.random_range(-1.0..1.0))
            .collect();
        best = best.min(run(&offsets));
    }
    Ok(eq - best)
}

// ---------------------------------------------------------------------------
// Brute-force one-step best responses
// ---------------------------------------------------------------------------

/// Deviation-channel data of a one-step game.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStepDeviation {
    /// Half order of the deviation cost (1 for the variance families).
    pub half_order: u32,
    pub a: f64,
    pub b: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub terminal: Vec<f64>,
    /// `E[ε²]` for the variance families, `E[ε^{2o}]` for the general-moment family.
    pub noise_moment: f64,
}

/// A single-stage game: running weights at step 0, terminal weights at step 1.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStepInstance {
    pub family: Family,
    pub p: u32,
    pub a_bar: f64,
    pub b_bar: Vec<f64>,
    pub q_bar: Vec<f64>,
    pub r_bar: Vec<f64>,
    pub terminal_bar: Vec<f64>,
    pub deviation: Option<OneStepDeviation>,
}

impl OneStepInstance {
    /// The stage game at step `k`, with continuation weights taken from `table`.
    pub fn from_scenario(s: &Scenario, table: &CoefficientTable, k: usize) -> Result<Self> {
        let col = |t: &[Vec<f64>], k: usize| t.iter().map(|row| row[k]).collect::<Vec<f64>>();
        let deviation = match (&s.dev_weights, &table.alpha, &s.noise) {
            (Some(w), Some(alpha), Some(noise)) => {
                let half_order = s.moment_order() / 2;
                Some(OneStepDeviation {
                    half_order,
                    a: s.deviation_drift(k),
                    b: (0..s.agents).map(|i| s.deviation_input(i, k)).collect(),
                    q: col(&w.q, k),
                    r: col(&w.r, k),
                    terminal: col(alpha, k + 1),
                    noise_moment: noise_even_moment(noise, k, 2 * half_order)?,
                })
            }
            _ => None,
        };
        Ok(Self {
            family: s.family,
            p: s.p,
            a_bar: s.a_bar[k],
            b_bar: col(&s.b_bar, k),
            q_bar: col(&s.mean_weights.q, k),
            r_bar: col(&s.mean_weights.r, k),
            terminal_bar: col(&table.alpha_bar, k + 1),
            deviation,
        })
    }

    /// The game of a horizon-one scenario.
    pub fn from_one_step_scenario(s: &Scenario) -> Result<Self> {
        if s.horizon != 1 {
            return Err(Error::Precondition(format!(
                "brute-force oracle needs horizon 1, got {}",
                s.horizon
            )));
        }
        let alpha_bar = (0..s.agents)
            .map(|i| vec![f64::NAN, s.mean_weights.q_terminal[i]])
            .collect();
        let alpha = s.dev_weights.as_ref().map(|w| {
            (0..s.agents)
                .map(|i| vec![f64::NAN, w.q_terminal[i]])
                .collect::<Vec<_>>()
        });
        let table = CoefficientTable {
            alpha_bar,
            alpha,
            gamma_bar: None,
        };
        Self::from_scenario(s, &table, 0)
    }
}

/// Result of the best-response iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub mean_gain: Vec<f64>,
    /// Agent values at unit mean state: the one-step `ᾱ_i0`.
    pub mean_value: Vec<f64>,
    pub dev_gain: Option<Vec<f64>>,
    /// Agent values at unit deviation: the one-step `α_i0`.
    pub dev_value: Option<Vec<f64>>,
    /// Noise constant of the additive family: the one-step `γ̄_i0`.
    pub dev_constant: Option<Vec<f64>>,
    pub converged: bool,
    /// Damped iteration rounds plus Newton steps; above 100 means Newton was needed.
    pub rounds: usize,
    pub notes: Vec<String>,
}

/// Agent objective `r u^{2h} + w (s + b u)^{2h}`.
#[derive(Debug, Clone, Copy)]
struct PowerPair {
    r: f64,
    w: f64,
    s: f64,
    b: f64,
    h: u32,
}

impl PowerPair {
    fn value(&self, u: f64) -> f64 {
        let e = 2 * self.h as i32;
        self.r * u.powi(e) + self.w * (self.s + self.b * u).powi(e)
    }

    fn slope(&self, u: f64) -> f64 {
        let e = 2 * self.h as i32 - 1;
        self.r * u.powi(e) + self.w * self.b * (self.s + self.b * u).powi(e)
    }

    /// Minimizer: dense grid over the bracket between the two term minimizers,
    /// golden-section search, then bisection on the sign of the slope.
    fn argmin(&self) -> f64 {
        if self.b == 0.0 || self.w == 0.0 || self.s == 0.0 {
            return 0.0;
        }
        let other = -self.s / self.b;
        let (lo, hi) = (other.min(0.0), other.max(0.0));
        const GRID: usize = 200;
        let step = (hi - lo) / GRID as f64;
        let best = (0..=GRID)
            .map(|j| (j, self.value(lo + step * j as f64)))
            .fold(
                (0, f64::INFINITY),
                |acc, (j, v)| if v < acc.1 { (j, v) } else { acc },
            )
            .0;
        let mut a = lo + step * best.saturating_sub(1) as f64;
        let mut b = (lo + step * (best + 1) as f64).min(hi);
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - inv_phi * (b - a);
        let mut d = a + inv_phi * (b - a);
        let (mut fc, mut fd) = (self.value(c), self.value(d));
        while (b - a).abs() > 1e-10 * (1.0 + a.abs().max(b.abs())) {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - inv_phi * (b - a);
                fc = self.value(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + inv_phi * (b - a);
                fd = self.value(d);
            }
        }
        let pad = 4.0 * (b - a) + 1e-12 * (1.0 + a.abs());
        let (mut x0, mut x1) = ((a - pad).max(lo), (b + pad).min(hi));
        if !(self.slope(x0) <= 0.0 && self.slope(x1) >= 0.0) {
            x0 = lo;
            x1 = hi;
        }
        for _ in 0..200 {
            let mid = 0.5 * (x0 + x1);
            if mid <= x0 || mid >= x1 {
                break;
            }
            if self.slope(mid) > 0.0 {
                x1 = mid;
            } else {
                x0 = mid;
            }
        }
        0.5 * (x0 + x1)
    }
}

/// One channel of the one-step game at unit state: agent `i` faces
/// `r_i u^{2h} + w_i (a + Σ_j b_j u_j)^{2h}` with `u_j = -g_j a`.
struct ChannelGame<'a> {
    a: f64,
    b: &'a [f64],
    r: &'a [f64],
    w: Vec<f64>,
    h: u32,
}

impl ChannelGame<'_> {
    fn pair(&self, g: &[f64], i: usize) -> PowerPair {
        let others: f64 = (0..g.len())
            .filter(|&j| j != i)
            .map(|j| self.b[j] * g[j])
            .sum();
        PowerPair {
            r: self.r[i],
            w: self.w[i],
            s: self.a * (1.0 - others),
            b: self.b[i],
            h: self.h,
        }
    }

    fn best_response(&self, g: &[f64]) -> Vec<f64> {
        (0..g.len())
            .map(|i| -self.pair(g, i).argmin() / self.a)
            .collect()
    }

    fn values(&self, g: &[f64]) -> Vec<f64> {
        (0..g.len())
            .map(|i| self.pair(g, i).value(-g[i] * self.a))
            .collect()
    }

    /// Damped best-response iteration, with a Newton phase on
    /// `BR(g) - g = 0` when the damped iteration does not settle.
    fn solve(&self, notes: &mut Vec<String>, label: &str) -> (Vec<f64>, bool, usize) {
        let n = self.b.len();
        let mut g = vec![0.0; n];
        for round in 1..=100 {
            let br = self.best_response(&g);
            let next: Vec<f64> = g.iter().zip(&br).map(|(g, b)| 0.5 * g + 0.5 * b).collect();
            let change = next
                .iter()
                .zip(&g)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            g = next;
            if change <= 1e-10 {
                return (g, true, round);
            }
        }
        let residual = |g: &[f64]| -> Vec<f64> {
            self.best_response(g)
                .iter()
                .zip(g)
                .map(|(b, g)| b - g)
                .collect()
        };
        let mut rounds = 100;
        for _ in 0..50 {
            rounds += 1;
            let f = residual(&g);
            let size = f.iter().map(|v| v.abs()).fold(0.0, f64::max);
            let scale = 1.0 + g.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if size <= 1e-12 * scale {
                return (g, true, rounds);
            }
            let mut jac = vec![vec![0.0; n]; n];
            for c in 0..n {
                let h = 1e-7 * (1.0 + g[c].abs());
                let mut gp = g.clone();
                let mut gm = g.clone();
                gp[c] += h;
                gm[c] -= h;
                let (fp, fm) = (residual(&gp), residual(&gm));
                for r in 0..n {
                    jac[r][c] = (fp[r] - fm[r]) / (2.0 * h);
                }
            }
            let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
            match gauss_solve(jac, rhs) {
                Some(step) => g.iter_mut().zip(step).for_each(|(g, d)| *g += d),
                None => break,
            }
        }
        let f = residual(&g);
        let size = f.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let ok = size <= 1e-9 * (1.0 + g.iter().map(|v| v.abs()).fold(0.0, f64::max));
        if !ok {
            notes.push(format!(
                "{label}: best-response iteration did not converge (residual {size:e})"
            ));
        }
        (g, ok, rounds)
    }
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn gauss_solve(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for c in col..n {
                m[row][c] -= f * m[col][c];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|c| m[row][c] * x[c]).sum();
        x[row] = (rhs[row] - tail) / m[row][row];
    }
    Some(x)
}

/// Solves each agent's one-step best response by direct minimization and
/// iterates best responses to a fixed point.
pub fn brute_force_one_step(inst: &OneStepInstance) -> Result<BruteForceResult> {
    if inst.a_bar == 0.0 {
        return Err(Error::Precondition(
            "brute-force oracle reads gains as u / a and needs a nonzero drift".into(),
        ));
    }
    let mut notes = Vec::new();
    let mean_game = ChannelGame {
        a: inst.a_bar,
        b: &inst.b_bar,
        r: &inst.r_bar,
        w: inst.terminal_bar.clone(),
        h: inst.p,
    };
    let (mean_gain, mut converged, mut rounds) = mean_game.solve(&mut notes, "mean channel");
    let mean_value: Vec<f64> = mean_game
        .values(&mean_gain)
        .iter()
        .zip(&inst.q_bar)
        .map(|(v, q)| v + q)
        .collect();

    let (mut dev_gain, mut dev_value, mut dev_constant) = (None, None, None);
    if let Some(dev) = &inst.deviation {
        if dev.a == 0.0 {
            return Err(Error::Precondition(
                "brute-force oracle needs a nonzero deviation drift".into(),
            ));
        }
        let transfer = match inst.family {
            Family::GeneralMoment2o2p => dev.noise_moment,
            _ => 1.0,
        };
        let game = ChannelGame {
            a: dev.a,
            b: &dev.b,
            r: &dev.r,
            w: dev.terminal.iter().map(|t| t * transfer).collect(),
            h: dev.half_order,
        };
        let (g, ok, r) = game.solve(&mut notes, "deviation channel");
        converged &= ok;
        rounds = rounds.max(r);
        let values: Vec<f64> = game
            .values(&g)
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let extra = match inst.family {
                    Family::MultiplicativeVariance2p => dev.terminal[i] * dev.noise_moment,
                    _ => 0.0,
                };
                v + dev.q[i] + extra
            })
            .collect();
        if inst.family == Family::AdditiveVariance2p {
            dev_constant = Some(dev.terminal.iter().map(|t| t * dev.noise_moment).collect());
        }
        dev_gain = Some(g);
        dev_value = Some(values);
    }
    Ok(BruteForceResult {
        mean_gain,
        mean_value,
        dev_gain,
        dev_value,
        dev_constant,
        converged,
        rounds,
        notes,
    })
}

/// Largest gap between the schedule's gains and the brute-force stage-game
/// gains over all steps, relative to `1 + |gain|`.
pub fn subgame_gain_gap(
    s: &Scenario,
    table: &CoefficientTable,
    gains: &GainSchedule,
) -> Result<(f64, Vec<String>)> {
    let mut gap: f64 = 0.0;
    let mut notes = Vec::new();
    for k in 0..s.horizon {
        let inst = OneStepInstance::from_scenario(s, table, k)?;
        if inst.a_bar == 0.0 || inst.deviation.as_ref().is_some_and(|d| d.a == 0.0) {
            notes.push(format!("step {k}: zero drift, stage-game oracle skipped"));
            continue;
        }
        let bf = brute_force_one_step(&inst)?;
        notes.extend(bf.notes.iter().map(|n| format!("step {k}: {n}")));
        for i in 0..s.agents {
            let g = gains.mean_gain[i][k];
            gap = gap.max((bf.mean_gain[i] - g).abs() / (1.0 + g.abs()));
            if let (Some(bg), Some(dg)) = (&bf.dev_gain, &gains.dev_gain) {
                let g = dg[i][k];
                gap = gap.max((bg[i] - g).abs() / (1.0 + g.abs()));
            }
        }
    }
    Ok((gap, notes))
}

// ---------------------------------------------------------------------------
// LQ reduction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LqReduction {
    /// Largest relative discrepancy across all comparisons made.
    pub max_discrepancy: f64,
    pub riccati_compared: bool,
    pub deviation_gains_compared: bool,
    pub passed: bool,
}

/// Scalar discrete Riccati recursion `P_k = q + a² P' - (a P' b)² / (r + b² P')`.
pub fn scalar_riccati(a: &[f64], b: &[f64], q: &[f64], r: &[f64], terminal: f64) -> Vec<f64> {
    let n = a.len();
    let mut p = vec![0.0; n + 1];
    p[n] = terminal;
    for k in (0..n).rev() {
        let next = p[k + 1];
        let cross = a[k] * next * b[k];
        p[k] = q[k] + a[k] * a[k] * next - cross * cross / (r[k] + b[k] * b[k] * next);
    }
    p
}

fn rel_gap(x: f64, y: f64) -> f64 {
    (x - y).abs() / x.abs().max(y.abs()).max(1.0)
}

/// For `p = 1`: the mean gain vector matches `ᾱ b̄ / (r̄ + ᾱ b̄²)`, a single
/// agent's `ᾱ` follows the scalar Riccati recursion, and in the variance
/// families with matching weights the mean and deviation gains coincide.
pub fn lq_reduction_check(
    s: &Scenario,
    table: &CoefficientTable,
    gains: &GainSchedule,
) -> Result<LqReduction> {
    if s.p != 1 {
        return Err(Error::Precondition(format!(
            "LQ reduction applies to p = 1, scenario has p = {}",
            s.p
        )));
    }
    let w = &s.mean_weights;
    let mut worst: f64 = 0.0;
    for i in 0..s.agents {
        for k in 0..s.horizon {
            let next = table.alpha_bar[i][k + 1];
            let b = s.b_bar[i][k];
            worst = worst.max(rel_gap(
                gains.c_bar[i][k],
                next * b / (w.r[i][k] + next * b * b),
            ));
        }
    }
    let riccati_compared = s.agents == 1;
    if riccati_compared {
        let p = scalar_riccati(&s.a_bar, &s.b_bar[0], &w.q[0], &w.r[0], w.q_terminal[0]);
        for (x, y) in p.iter().zip(&table.alpha_bar[0]) {
            worst = worst.max(rel_gap(*x, *y));
        }
    }
    let deviation_gains_compared = matches!(
        s.family,
        Family::AdditiveVariance2p | Family::MultiplicativeVariance2p
    ) && s.dev_weights.as_ref() == Some(w);
    if deviation_gains_compared {
        if let Some(dg) = &gains.dev_gain {
            for (mrow, drow) in gains.mean_gain.iter().zip(dg) {
                for (x, y) in mrow.iter().zip(drow) {
                    worst = worst.max(rel_gap(*x, *y));
                }
            }
        }
    }
    Ok(LqReduction {
        max_discrepancy: worst,
        riccati_compared,
        deviation_gains_compared,
        passed: worst <= 1e-12,
    })
}

// ---------------------------------------------------------------------------
// Bellman identity
// ---------------------------------------------------------------------------

/// A state of the moment dynamics: mean `x̄` and central moment `M` of the
/// family's order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub mean: f64,
    pub moment: f64,
}

/// A fixed set of corner probes followed by `count` seeded random ones.
pub fn default_probes(count: usize, seed: u64) -> Vec<Probe> {
    let mut out = vec![
        Probe {
            mean: 1.0,
            moment: 0.0,
        },
        Probe {
            mean: 0.0,
            moment: 1.0,
        },
        Probe {
            mean: -1.5,
            moment: 0.5,
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.extend((0..count).map(|_| Probe {
        mean: rng.random_range(-2.0..2.0),
        moment: rng.random_range(0.0..2.0),
    }));
    out
}

/// Largest relative residual of `f_k(probe) = stage_k(probe) + f_{k+1}(push(probe))`
/// over the probes, where `f_k = α_k M + ᾱ_k x̄^{2p} + γ̄_k` and the
/// pushforward propagates mean and moment one step under the equilibrium gains.
pub fn bellman_identity_check(
    s: &Scenario,
    table: &CoefficientTable,
    gains: &GainSchedule,
    k: usize,
    probes: &[Probe],
) -> Result<f64> {
    let exp = 2 * s.p as i32;
    let order = s.moment_order();
    let m_exp = order as i32;
    let noise_moment = match &s.noise {
        Some(noise) => noise_even_moment(noise, k, order.max(2))?,
        None => 0.0,
    };
    let mut worst: f64 = 0.0;
    for probe in probes {
        // Mean channel.
        let a = s.a_bar[k];
        let u_bar: Vec<f64> = (0..s.agents)
            .map(|j| -gains.mean_gain[j][k] * a * probe.mean)
            .collect();
        let mean_next =
            a * probe.mean + (0..s.agents).map(|j| s.b_bar[j][k] * u_bar[j]).sum::<f64>();

        // Deviation channel: a unit-law deviation d scaled so E[d^m] = M.
        let moment_next = match &gains.dev_gain {
            Some(g) => {
                let d = s.deviation_drift(k);
                let mut channel = d;
                for j in 0..s.agents {
                    channel -= s.deviation_input(j, k) * g[j][k] * d;
                }
                let transfer = channel.powi(m_exp);
                match s.family {
                    Family::AdditiveVariance2p => transfer * probe.moment + noise_moment,
                    Family::MultiplicativeVariance2p => (transfer + noise_moment) * probe.moment,
                    Family::GeneralMoment2o2p => transfer * noise_moment * probe.moment,
                    Family::Deterministic2p => 0.0,
                }
            }
            None => 0.0,
        };

        for i in 0..s.agents {
            let f = |step: usize, mean: f64, moment: f64| {
                let mut v = table.alpha_bar[i][step] * mean.powi(exp);
                if let Some(alpha) = &table.alpha {
                    v += alpha[i][step] * moment;
                }
                if let Some(gamma) = &table.gamma_bar {
                    v += gamma[i][step];
                }
                v
            };
            let w = &s.mean_weights;
            let mut stage = w.q[i][k] * probe.mean.powi(exp) + w.r[i][k] * u_bar[i].powi(exp);
            if let (Some(dw), Some(g)) = (&s.dev_weights, &gains.dev_gain) {
                let du = g[i][k] * s.deviation_drift(k);
                stage += (dw.q[i][k] + dw.r[i][k] * du.powi(m_exp)) * probe.moment;
            }
            let lhs = f(k, probe.mean, probe.moment);
            let rhs = stage + f(k + 1, mean_next, moment_next);
            let scale = lhs.abs().max(rhs.abs());
            if scale > 0.0 {
                worst = worst.max((lhs - rhs).abs() / scale);
            }
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Convexity
// ---------------------------------------------------------------------------

/// Symmetric grid around both vanishing points of `z^{2p} + (a z + b)^{2p}`.
pub fn convexity_grid(a: f64, b: f64) -> Vec<f64> {
    let root = -b / a;
    let reach = 2.0 * (1.0 + root.abs());
    let mut grid: Vec<f64> = (0..=40).map(|j| reach * (j as f64 / 20.0 - 1.0)).collect();
    for centre in [0.0, root] {
        for off in [0.0, 1e-9, -1e-9, 1e-6, -1e-6, 1e-3, -1e-3] {
            grid.push(centre + off);
        }
    }
    grid
}

/// Draws random `(p ≤ 5, a, b)` with `a, b ≠ 0` and returns the smallest
/// second derivative found across all draws.
pub fn random_convexity_draws(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min = f64::INFINITY;
    for _ in 0..draws {
        let p = rng.random_range(1..=5u32);
        let mut nonzero = || {
            let mag = rng.random_range(0.05..5.0);
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        };
        let (a, b) = (nonzero(), nonzero());
        min = min.min(convexity_scan(p, a, b, &convexity_grid(a, b))?);
    }
    Ok(min)
}

/// Each agent's stage objective, rescaled to `z^{2h} + (a z + b)^{2h}`,
/// scanned for convexity. Returns the smallest second derivative, or `+∞`
/// when no stage objective has both coefficients nonzero.
pub fn convexity_samples(
    s: &Scenario,
    table: &CoefficientTable,
    gains: &GainSchedule,
) -> Result<f64> {
    let mut min = f64::INFINITY;
    let mut scan = |r: f64, w: f64, shift: f64, b: f64, h: u32| -> Result<()> {
        let root = 1.0 / f64::from(2 * h);
        let (la, lb) = (w.powf(root) * b / r.powf(root), w.powf(root) * shift);
        if la != 0.0 && lb != 0.0 && la.is_finite() && lb.is_finite() {
            min = min.min(convexity_scan(h, la, lb, &convexity_grid(la, lb))?);
        }
        Ok(())
    };
    for k in 0..s.horizon {
        for i in 0..s.agents {
            let others: f64 = (0..s.agents)
                .filter(|&j| j != i)
                .map(|j| s.b_bar[j][k] * gains.mean_gain[j][k])
                .sum();
            scan(
                s.mean_weights.r[i][k],
                table.alpha_bar[i][k + 1],
                s.a_bar[k] * (1.0 - others),
                s.b_bar[i][k],
                s.p,
            )?;
            if let (Some(dw), Some(alpha), Some(g)) =
                (&s.dev_weights, &table.alpha, &gains.dev_gain)
            {
                let half = s.moment_order() / 2;
                let transfer = match (s.family, &s.noise) {
                    (Family::GeneralMoment2o2p, Some(noise)) => {
                        noise_even_moment(noise, k, s.moment_order())?
                    }
                    _ => 1.0,
                };
                let others: f64 = (0..s.agents)
                    .filter(|&j| j != i)
                    .map(|j| s.deviation_input(j, k) * g[j][k])
                    .sum();
                scan(
                    dw.r[i][k],
                    alpha[i][k + 1] * transfer,
                    s.deviation_drift(k) * (1.0 - others),
                    s.deviation_input(i, k),
                    half,
                )?;
            }
        }
    }
    Ok(min)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub grid: GridSpec,
    /// Random probes per step for the Bellman check (corner probes are always added).
    pub probes: usize,
    pub probe_seed: u64,
    /// Random open-loop sequences for the jitter smoke test.
    pub jitter_draws: usize,
    /// Compare every step's gains with the brute-force stage-game oracle.
    pub subgame_oracle: bool,
}

impl VerifyOptions {
    pub fn for_scenario(s: &Scenario) -> Self {
        Self {
            grid: GridSpec {
                seed: s.mc.seed,
                ..GridSpec::default()
            },
            probes: 16,
            probe_seed: 1,
            jitter_draws: 200,
            subgame_oracle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositivityFlag {
    pub table: &'static str,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub deviation: Vec<DeviationOutcome>,
    /// Largest stationarity residual over `(i, k)`.
    pub stationarity: f64,
    pub positivity: Vec<PositivityFlag>,
    pub convexity_min: f64,
    /// Per step `k = 0..N-1`.
    pub bellman_residual: Vec<f64>,
    pub subgame_gap: Option<f64>,
    pub jitter_margin: Option<f64>,
    pub lq: Option<LqReduction>,
    pub notes: Vec<String>,
}

impl VerificationReport {
    /// Names of the failed criteria; empty when the report passes.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for d in &self.deviation {
            if !d.passed() {
                out.push(format!(
                    "unilateral deviation, agent {}: margin {:e}",
                    d.agent + 1,
                    d.margin()
                ));
            }
        }
        if !(self.stationarity <= STATIONARITY_TOL) {
            out.push(format!("stationarity residual {:e}", self.stationarity));
        }
        for p in &self.positivity {
            if !p.holds {
                out.push(format!("positivity of {}", p.table));
            }
        }
        if !(self.convexity_min > 0.0) {
            out.push(format!("convexity minimum {:e}", self.convexity_min));
        }
        let bellman = self.bellman_residual.iter().copied().fold(0.0, f64::max);
        if !(bellman <= BELLMAN_TOL) {
            out.push(format!("bellman residual {bellman:e}"));
        }
        if let Some(gap) = self.subgame_gap {
            if !(gap <= SUBGAME_TOL) {
                out.push(format!("stage-game oracle gap {gap:e}"));
            }
        }
        if let Some(m) = self.jitter_margin {
            if !(m <= DETERMINISTIC_DEVIATION_TOL * self.jitter_scale()) {
                out.push(format!("open-loop jitter margin {m:e}"));
            }
        }
        if let Some(lq) = &self.lq {
            if !lq.passed {
                out.push(format!("LQ reduction discrepancy {:e}", lq.max_discrepancy));
            }
        }
        out
    }

    fn jitter_scale(&self) -> f64 {
        self.deviation
            .iter()
            .flat_map(|d| d.probes.iter())
            .filter(|p| p.channel == GainChannel::Mean)
            .map(|p| p.equilibrium_cost.abs())
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// Solves the scenario and runs every check.
pub fn verify(s: &Scenario, opts: &VerifyOptions) -> Result<VerificationReport> {
    let (table, gains) = solve(s)?;
    verify_solution(s, &table, &gains, opts)
}

/// Runs every check against the given tables and gains.
pub fn verify_solution(
    s: &Scenario,
    table: &CoefficientTable,
    gains: &GainSchedule,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let mut notes = Vec::new();

    let mut stationarity: f64 = 0.0;
    for i in 0..s.agents {
        for k in 0..s.horizon {
            let r = stationarity_residual(s, table, gains, i, k);
            stationarity = if r.is_nan() {
                f64::NAN
            } else {
                stationarity.max(r)
            };
        }
    }

    let all = |t: &[Vec<f64>], strict: bool| {
        t.iter()
            .flatten()
            .all(|&v| if strict { v > 0.0 } else { v >= 0.0 })
    };
    let mut positivity = vec![PositivityFlag {
        table: "alpha_bar",
        holds: all(&table.alpha_bar, true),
    }];
    if let Some(alpha) = &table.alpha {
        positivity.push(PositivityFlag {
            table: "alpha",
            holds: all(alpha, true),
        });
    }
    if let Some(gamma) = &table.gamma_bar {
        positivity.push(PositivityFlag {
            table: "gamma_bar",
            holds: all(gamma, false),
        });
    }

    let convexity_min = convexity_samples(s, table, gains)?;
    if convexity_min == f64::INFINITY {
        notes.push("no stage objective with nonzero coefficients to scan for convexity".into());
    }

    let probes = default_probes(opts.probes, opts.probe_seed);
    let bellman_residual = (0..s.horizon)
        .map(|k| bellman_identity_check(s, table, gains, k, &probes))
        .collect::<Result<Vec<_>>>()?;

    let subgame_gap = if opts.subgame_oracle {
        let (gap, n) = subgame_gain_gap(s, table, gains)?;
        notes.extend(n);
        Some(gap)
    } else {
        None
    };

    let deviation = (0..s.agents)
        .map(|i| unilateral_deviation_test(s, gains, i, &opts.grid))
        .collect::<Result<Vec<_>>>()?;

    let jitter_margin = if s.family == Family::Deterministic2p && opts.jitter_draws > 0 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..s.agents {
            worst = worst.max(open_loop_jitter_test(
                s,
                gains,
                i,
                opts.jitter_draws,
                opts.probe_seed,
            )?);
        }
        Some(worst)
    } else {
        None
    };

    let lq = if s.p == 1 {
        Some(lq_reduction_check(s, table, gains)?)
    } else {
        None
    };

    Ok(VerificationReport {
        deviation,
        stationarity,
        positivity,
        convexity_min,
        bellman_residual,
        subgame_gap,
        jitter_margin,
        lq,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_contains_exact_one() {
        let f = GridSpec::default().factors();
        assert_eq!(f.len(), 101);
        assert_eq!(f[50], 1.0);
        assert!((f[0] - 0.8).abs() < 1e-15 && (f[100] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn power_pair_minimizer() {
        // r u² + w (s + b u)²: minimizer -w b s / (r + w b²).
        let pp = PowerPair {
            r: 2.0,
            w: 3.0,
            s: 1.5,
            b: -0.7,
            h: 1,
        };
        let exact = -3.0 * -0.7 * 1.5 / (2.0 + 3.0 * 0.49);
        assert!((pp.argmin() - exact).abs() < 1e-14);
    }

    #[test]
    fn riccati_hand_value() {
        let p = scalar_riccati(&[1.0], &[1.0], &[1.0], &[1.0], 1.0);
        assert_eq!(p, vec![1.5, 1.0]);
    }

    #[test]
    fn gauss_solve_small() {
        let x = gauss_solve(vec![vec![1.0, 0.5], vec![0.5, 1.0]], vec![0.5, 0.5]).unwrap();
        assert!((x[0] - 1.0 / 3.0).abs() < 1e-15 && (x[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(gauss_solve(vec![vec![1.0, 1.0], vec![1.0, 1.0]], vec![1.0, 0.0]).is_none());
    }
}
