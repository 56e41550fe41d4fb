//! Backward recursions for the coefficient tables and equilibrium gains.
//!
//! Every family shares the `2p`-order mean recursion; the stochastic families
//! add a deviation channel (`α`, and `γ̄` for additive noise). The equilibrium
//! control of agent `i` at step `k` is
//!
//! ```text
//! u_ik = -g_ik · d_k · (x_k - x̄_k) - ḡ_ik · ā_k · x̄_k
//! ```
//!
//! with `d_k = a_k` for the general-moment family and `d_k = ā_k` otherwise.

use crate::error::{Error, Result};
use crate::numerics::{noise_even_moment, signed_root, solve_linear, SmallMatrix};
use crate::scenario::{validate, Family, Scenario};

/// Coefficients above this magnitude are reported as overflow.
pub const OVERFLOW_LIMIT: f64 = 1e300;

/// Backward coefficients, indexed `[agent][k]` for `k = 0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable {
    pub alpha_bar: Vec<Vec<f64>>,
    /// Deviation-channel coefficient (stochastic families).
    pub alpha: Option<Vec<Vec<f64>>>,
    /// Noise accumulation constant (additive family).
    pub gamma_bar: Option<Vec<Vec<f64>>>,
}

impl CoefficientTable {
    /// Equilibrium cost-to-go of agent `i` from the scenario's initial law:
    /// `α_i0 · E[(x_0 - x̄_0)^m] + ᾱ_i0 · x̄_0^{2p} + γ̄_i0`, with `m` the
    /// family's moment order.
    pub fn equilibrium_cost(&self, s: &Scenario, i: usize) -> f64 {
        let mut total = self.alpha_bar[i][0] * s.x0.mean.powi(2 * s.p as i32);
        if let Some(alpha) = &self.alpha {
            total += alpha[i][0] * s.x0.central_moment(s.moment_order());
        }
        if let Some(gamma) = &self.gamma_bar {
            total += gamma[i][0];
        }
        total
    }
}

/// Per-step gains, indexed `[agent][k]` for `k = 0..N-1`, with the raw
/// c-vectors and coupling matrices they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    /// `ḡ_ik = (Ē_k⁻¹ c̄_k)_i`.
    pub mean_gain: Vec<Vec<f64>>,
    /// `g_ik = (E_k⁻¹ c_k)_i`, or `(Ẽ_k⁻¹ c̃_k)_i` for the general-moment family.
    pub dev_gain: Option<Vec<Vec<f64>>>,
    pub c_bar: Vec<Vec<f64>>,
    /// `c` or `c̃`, matching `dev_gain`.
    pub c_dev: Option<Vec<Vec<f64>>>,
    pub e_bar: Vec<SmallMatrix>,
    pub e_dev: Option<Vec<SmallMatrix>>,
    /// `ā_k (1 - Σ_j ḡ_jk b̄_jk)`.
    pub closed_loop_mean: Vec<f64>,
    /// `d_k (1 - Σ_j g_jk b_jk)`, noise factor excluded.
    pub closed_loop_dev: Option<Vec<f64>>,
}

/// Form of the `α` recursion in the general-moment family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MomentRecursionForm {
    /// `α_ik = q_ik + r_ik (g̃_ik a_k)^{2o} + α_{i,k+1} m_{k+1,2o} (a_k - Σ_j g̃_jk a_k b_jk)^{2o}`.
    /// Satisfies the one-step Bellman identity.
    #[default]
    WithMomentFactor,
    /// The same recursion without the `m_{k+1,2o}` factor on the propagated term.
    AsPrinted,
}

/// Solves any family, using [`MomentRecursionForm::WithMomentFactor`] for the
/// general-moment family.
pub fn solve(s: &Scenario) -> Result<(CoefficientTable, GainSchedule)> {
    match s.family {
        Family::Deterministic2p => solve_deterministic(s),
        Family::AdditiveVariance2p => solve_additive(s),
        Family::MultiplicativeVariance2p => solve_multiplicative(s),
        Family::GeneralMoment2o2p => solve_general_moment(s),
    }
}

pub fn solve_deterministic(s: &Scenario) -> Result<(CoefficientTable, GainSchedule)> {
    check_input(s, Family::Deterministic2p)?;
    let mean = solve_mean(s)?;
    Ok(assemble(mean, None, None))
}

pub fn solve_additive(s: &Scenario) -> Result<(CoefficientTable, GainSchedule)> {
    check_input(s, Family::AdditiveVariance2p)?;
    let mean = solve_mean(s)?;
    let dev = solve_quadratic_deviation(s, NoiseEntry::Additive)?;
    Ok(assemble(mean, Some(dev.0), dev.1))
}

pub fn solve_multiplicative(s: &Scenario) -> Result<(CoefficientTable, GainSchedule)> {
    check_input(s, Family::MultiplicativeVariance2p)?;
    let mean = solve_mean(s)?;
    let dev = solve_quadratic_deviation(s, NoiseEntry::Multiplicative)?;
    Ok(assemble(mean, Some(dev.0), None))
}

pub fn solve_general_moment(s: &Scenario) -> Result<(CoefficientTable, GainSchedule)> {
    solve_general_moment_with(s, MomentRecursionForm::default())
}

pub fn solve_general_moment_with(
    s: &Scenario,
    form: MomentRecursionForm,
) -> Result<(CoefficientTable, GainSchedule)> {
    check_input(s, Family::GeneralMoment2o2p)?;
    let mean = solve_mean(s)?;
    let dev = solve_moment_deviation(s, form)?;
    Ok(assemble(mean, Some(dev), None))
}

fn check_input(s: &Scenario, family: Family) -> Result<()> {
    if s.family != family {
        return Err(Error::Precondition(format!(
            "solver for family `{}` called on a `{}` scenario",
            family.config_name(),
            s.family.config_name()
        )));
    }
    let diagnostics = validate(s);
    if diagnostics.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(diagnostics))
    }
}

/// Output of one channel's backward sweep.
struct Channel {
    coeff: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    gain: Vec<Vec<f64>>,
    e: Vec<SmallMatrix>,
    closed_loop: Vec<f64>,
}

impl Channel {
    fn new(agents: usize, n: usize, terminal: &[f64]) -> Self {
        let mut coeff = vec![vec![0.0; n + 1]; agents];
        for (row, &t) in coeff.iter_mut().zip(terminal) {
            row[n] = t;
        }
        Self {
            coeff,
            c: vec![vec![0.0; n]; agents],
            gain: vec![vec![0.0; n]; agents],
            e: Vec::with_capacity(n),
            closed_loop: vec![0.0; n],
        }
    }

    fn next(&self, k: usize) -> Vec<f64> {
        self.coeff.iter().map(|row| row[k + 1]).collect()
    }

    fn record(&mut self, k: usize, c: &[f64], e: SmallMatrix, gain: &[f64], closed_loop: f64) {
        for i in 0..c.len() {
            self.c[i][k] = c[i];
            self.gain[i][k] = gain[i];
        }
        self.e.push(e);
        self.closed_loop[k] = closed_loop;
    }
}

fn assemble(
    mean: Channel,
    dev: Option<Channel>,
    gamma_bar: Option<Vec<Vec<f64>>>,
) -> (CoefficientTable, GainSchedule) {
    let (alpha, dev_gain, c_dev, e_dev, closed_loop_dev) = match dev {
        Some(mut d) => {
            d.e.reverse();
            (
                Some(d.coeff),
                Some(d.gain),
                Some(d.c),
                Some(d.e),
                Some(d.closed_loop),
            )
        }
        None => (None, None, None, None, None),
    };
    let mut e_bar = mean.e;
    e_bar.reverse();
    (
        CoefficientTable {
            alpha_bar: mean.coeff,
            alpha,
            gamma_bar,
        },
        GainSchedule {
            mean_gain: mean.gain,
            dev_gain,
            c_bar: mean.c,
            c_dev,
            e_bar,
            e_dev,
            closed_loop_mean: mean.closed_loop,
            closed_loop_dev,
        },
    )
}

/// Solves `E g = c` for the coupling matrix of `c` and `b`; returns the
/// matrix, the gains and `drift · (1 - Σ g_j b_j)`.
fn coupled_gains(
    c: &[f64],
    b: &[f64],
    drift: f64,
    context: impl FnOnce() -> String,
) -> Result<(SmallMatrix, Vec<f64>, f64)> {
    let e = SmallMatrix::coupling(c, b)?;
    let g = solve_linear(&e, c).map_err(|err| err.with_context(context()))?;
    let feedback: f64 = g.iter().zip(b).map(|(g, b)| g * b).sum();
    Ok((e, g, drift * (1.0 - feedback)))
}

/// `c = κ / (1 + κ b)` with `κ` the signed `(2h-1)`-th root of `w b / r`.
fn power_c(weight_next: f64, b: f64, r: f64, half_order: u32) -> Result<f64> {
    let kappa = signed_root(weight_next * b / r, 2 * half_order - 1)?;
    Ok(kappa / (1.0 + kappa * b))
}

fn guard(value: f64, what: &'static str, agent: usize, step: usize) -> Result<f64> {
    if value.is_finite() && value.abs() <= OVERFLOW_LIMIT {
        Ok(value)
    } else {
        Err(Error::Overflow {
            what,
            agent: agent + 1,
            step,
            value,
        })
    }
}

/// The `2p`-order mean recursion shared by all families.
fn solve_mean(s: &Scenario) -> Result<Channel> {
    let (agents, n) = (s.agents, s.horizon);
    let w = &s.mean_weights;
    let exp = 2 * s.p as i32;
    let mut ch = Channel::new(agents, n, &w.q_terminal);
    for k in (0..n).rev() {
        let next = ch.next(k);
        let a = s.a_bar[k];
        let b: Vec<f64> = (0..agents).map(|i| s.b_bar[i][k]).collect();
        let c = (0..agents)
            .map(|i| power_c(next[i], b[i], w.r[i][k], s.p))
            .collect::<Result<Vec<_>>>()?;
        let (e, g, cl) = coupled_gains(&c, &b, a, || format!("mean channel, step {k}"))?;
        for i in 0..agents {
            let value = w.q[i][k] + w.r[i][k] * (g[i] * a).powi(exp) + next[i] * cl.powi(exp);
            ch.coeff[i][k] = guard(value, "alpha_bar", i, k)?;
        }
        ch.record(k, &c, e, &g, cl);
    }
    Ok(ch)
}

#[derive(Clone, Copy, PartialEq)]
enum NoiseEntry {
    Additive,
    Multiplicative,
}

/// Quadratic deviation channel of the variance-aware families; returns the
/// channel and, for additive noise, the `γ̄` table.
fn solve_quadratic_deviation(
    s: &Scenario,
    entry: NoiseEntry,
) -> Result<(Channel, Option<Vec<Vec<f64>>>)> {
    let (agents, n) = (s.agents, s.horizon);
    let w = s
        .dev_weights
        .as_ref()
        .ok_or_else(|| Error::Precondition("deviation weights missing".into()))?;
    let noise = s
        .noise
        .as_ref()
        .ok_or_else(|| Error::Precondition("noise specification missing".into()))?;
    let mut ch = Channel::new(agents, n, &w.q_terminal);
    let mut gamma = (entry == NoiseEntry::Additive).then(|| vec![vec![0.0; n + 1]; agents]);
    for k in (0..n).rev() {
        let next = ch.next(k);
        let m2 = noise_even_moment(noise, k, 2)?;
        let a = s.a_bar[k];
        let b: Vec<f64> = (0..agents).map(|i| s.b_bar[i][k]).collect();
        let c: Vec<f64> = (0..agents)
            .map(|i| next[i] * b[i] / (w.r[i][k] + next[i] * b[i] * b[i]))
            .collect();
        let (e, g, cl) = coupled_gains(&c, &b, a, || format!("deviation channel, step {k}"))?;
        for i in 0..agents {
            let mut value = w.q[i][k] + w.r[i][k] * (g[i] * a).powi(2) + next[i] * cl.powi(2);
            if entry == NoiseEntry::Multiplicative {
                value += next[i] * m2;
            }
            ch.coeff[i][k] = guard(value, "alpha", i, k)?;
            if let Some(gamma) = gamma.as_mut() {
                gamma[i][k] = guard(gamma[i][k + 1] + next[i] * m2, "gamma_bar", i, k)?;
            }
        }
        ch.record(k, &c, e, &g, cl);
    }
    Ok((ch, gamma))
}

/// `2o`-order deviation channel of the general-moment family.
fn solve_moment_deviation(s: &Scenario, form: MomentRecursionForm) -> Result<Channel> {
    let (agents, n) = (s.agents, s.horizon);
    let (w, noise, dd, o) = match (&s.dev_weights, &s.noise, &s.deviation_dynamics, s.o) {
        (Some(w), Some(noise), Some(dd), Some(o)) => (w, noise, dd, o),
        _ => {
            return Err(Error::Precondition(
                "general-moment scenario lacks deviation data".into(),
            ))
        }
    };
    let exp = 2 * o as i32;
    let mut ch = Channel::new(agents, n, &w.q_terminal);
    for k in (0..n).rev() {
        let next = ch.next(k);
        let m = noise_even_moment(noise, k, 2 * o)?;
        let a = dd.a[k];
        let b: Vec<f64> = (0..agents).map(|i| dd.b[i][k]).collect();
        let c = (0..agents)
            .map(|i| power_c(next[i] * m, b[i], w.r[i][k], o))
            .collect::<Result<Vec<_>>>()?;
        let (e, g, cl) = coupled_gains(&c, &b, a, || format!("moment channel, step {k}"))?;
        let transfer = match form {
            MomentRecursionForm::WithMomentFactor => m,
            MomentRecursionForm::AsPrinted => 1.0,
        };
        for i in 0..agents {
            let value =
                w.q[i][k] + w.r[i][k] * (g[i] * a).powi(exp) + next[i] * transfer * cl.powi(exp);
            ch.coeff[i][k] = guard(value, "alpha", i, k)?;
        }
        ch.record(k, &c, e, &g, cl);
    }
    Ok(ch)
}

/// Relative residual of agent `i`'s first-order condition at step `k`,
/// evaluated with the schedule's gains at unit mean and unit deviation.
/// The larger of the mean-channel and deviation-channel residuals is returned.
pub fn stationarity_residual(
    s: &Scenario,
    table: &CoefficientTable,
    gains: &GainSchedule,
    i: usize,
    k: usize,
) -> f64 {
    let agents = s.agents;
    let p = s.p;

    let a = s.a_bar[k];
    let u: Vec<f64> = (0..agents).map(|j| -gains.mean_gain[j][k] * a).collect();
    let next_mean = a + (0..agents).map(|j| s.b_bar[j][k] * u[j]).sum::<f64>();
    let mean_residual = balance(
        s.mean_weights.r[i][k] * u[i].powi(2 * p as i32 - 1),
        table.alpha_bar[i][k + 1] * s.b_bar[i][k] * next_mean.powi(2 * p as i32 - 1),
    );

    let dev_residual = match (&gains.dev_gain, &table.alpha, &s.dev_weights) {
        (Some(dev_gain), Some(alpha), Some(w)) => {
            let (half, weight) = match s.family {
                Family::GeneralMoment2o2p => {
                    let o = s.o.unwrap_or(1);
                    let m = s
                        .noise
                        .as_ref()
                        .and_then(|n| noise_even_moment(n, k, 2 * o).ok())
                        .unwrap_or(f64::NAN);
                    (o, alpha[i][k + 1] * m)
                }
                _ => (1, alpha[i][k + 1]),
            };
            let d = s.deviation_drift(k);
            let du: Vec<f64> = (0..agents).map(|j| -dev_gain[j][k] * d).collect();
            let next_dev = d
                + (0..agents)
                    .map(|j| s.deviation_input(j, k) * du[j])
                    .sum::<f64>();
            balance(
                w.r[i][k] * du[i].powi(2 * half as i32 - 1),
                weight * s.deviation_input(i, k) * next_dev.powi(2 * half as i32 - 1),
            )
        }
        _ => 0.0,
    };
    mean_residual.max(dev_residual)
}

fn balance(t1: f64, t2: f64) -> f64 {
    let scale = t1.abs().max(t2.abs());
    if scale == 0.0 {
        0.0
    } else {
        (t1 + t2).abs() / scale
    }
}
