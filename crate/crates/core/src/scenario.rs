//! Problem instances: data model, validation, and the TOML configuration format.
//!
//! A scenario document is TOML. Per-step quantities accept a scalar (broadcast
//! over the horizon) or a list of `horizon` values; per-agent quantities accept
//! a scalar (all agents, all steps) or a list with one entry per agent, each
//! entry again a scalar or a per-step list. Loading materializes every
//! sequence, so a loaded [`Scenario`] carries no broadcast shorthand.
//!
//! ```toml
//! family = "deterministic"
//! agents = 2
//! horizon = 7
//! p = 2
//!
//! [dynamics]
//! a_bar = 1.0
//! b_bar = [-2.0, 2.0]
//!
//! [weights]
//! q_bar = [4.0, 5.0]
//! q_bar_terminal = [4.0, 5.0]
//! r_bar = [6.0, 7.0]
//!
//! [initial]
//! kind = "deterministic"
//! mean = 10.0
//! ```
//!
//! The full key reference lives in `docs/scenario-format.md`.

use serde::{Deserialize, Serialize};

use crate::error::{Condition, Diagnostic, Error, Result};
use crate::numerics::double_factorial_odd;

/// Game family: which dynamics and which cost structure apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    /// Mean dynamics only, costs `x̄^{2p}` and `ū^{2p}`.
    #[serde(rename = "deterministic")]
    Deterministic2p,
    /// Additive noise, variance plus `2p`-power mean costs.
    #[serde(rename = "additive-variance")]
    AdditiveVariance2p,
    /// Noise multiplying the state deviation, variance plus `2p`-power mean costs.
    #[serde(rename = "multiplicative-variance")]
    MultiplicativeVariance2p,
    /// Noise multiplying state and control deviations, `2o`-th central moment costs.
    #[serde(rename = "general-moment")]
    GeneralMoment2o2p,
}

impl Family {
    pub fn is_stochastic(self) -> bool {
        !matches!(self, Family::Deterministic2p)
    }

    /// Name used in configuration documents.
    pub fn config_name(self) -> &'static str {
        match self {
            Family::Deterministic2p => "deterministic",
            Family::AdditiveVariance2p => "additive-variance",
            Family::MultiplicativeVariance2p => "multiplicative-variance",
            Family::GeneralMoment2o2p => "general-moment",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Gaussian,
    Rademacher,
    /// Uniform on `[-σ√3, σ√3]`.
    Uniform,
    /// Only the even moments are known; cannot be sampled.
    ExplicitMoments,
}

/// Zero-mean noise law per transition. Entry `k` of `sigma` (and row `k` of
/// `moments`) describes `ε_{k+1}`, the noise entering the step `k → k+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub sigma: Vec<f64>,
    /// `moments[k][j-1] = E[ε_{k+1}^{2j}]`, explicit-moment kind only.
    pub moments: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialKind {
    Deterministic,
    GaussianAroundMean,
    EmpiricalSamples,
}

/// Law of `x_0`.
///
/// `mean` is the model mean `x̄_0` that feeds the mean channel. A deterministic
/// law may place its atom at `value` away from `mean`; the deviation
/// `value - mean` then seeds the deviation channel on every path.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialLaw {
    pub kind: InitialKind,
    pub mean: f64,
    pub value: Option<f64>,
    pub variance: f64,
    /// Samples as written in the document, before recentering.
    pub samples: Option<Vec<f64>>,
}

impl InitialLaw {
    pub fn deterministic(mean: f64) -> Self {
        Self {
            kind: InitialKind::Deterministic,
            mean,
            value: None,
            variance: 0.0,
            samples: None,
        }
    }

    /// Location of the atom of a deterministic law.
    pub fn atom(&self) -> f64 {
        self.value.unwrap_or(self.mean)
    }

    /// Shift applied to raw samples so their average equals `mean`.
    pub fn sample_offset(&self) -> f64 {
        match &self.samples {
            Some(s) if !s.is_empty() => self.mean - s.iter().sum::<f64>() / s.len() as f64,
            _ => 0.0,
        }
    }

    /// Samples recentered on `mean`.
    pub fn centered_samples(&self) -> Vec<f64> {
        let offset = self.sample_offset();
        self.samples
            .as_deref()
            .unwrap_or_default()
            .iter()
            .map(|s| s + offset)
            .collect()
    }

    /// `E[(x_0 - x̄_0)^order]` for an even order.
    pub fn central_moment(&self, order: u32) -> f64 {
        match self.kind {
            InitialKind::Deterministic => (self.atom() - self.mean).powi(order as i32),
            InitialKind::GaussianAroundMean => {
                self.variance.powi(order as i32 / 2) * double_factorial_odd(order / 2)
            }
            InitialKind::EmpiricalSamples => {
                let samples = self.centered_samples();
                if samples.is_empty() {
                    return 0.0;
                }
                samples
                    .iter()
                    .map(|s| (s - self.mean).powi(order as i32))
                    .sum::<f64>()
                    / samples.len() as f64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum StreamScheme {
    /// Path `m` draws from ChaCha8 stream `m` under the master seed.
    #[default]
    #[serde(rename = "per-path substream")]
    PerPathSubstream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MonteCarloConfig {
    /// Zero means mean path only.
    pub paths: u64,
    pub seed: u64,
    pub stream_scheme: StreamScheme,
}

/// Per-agent running weights (agent-major, `horizon` entries each) and terminal weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub q: Vec<Vec<f64>>,
    pub q_terminal: Vec<f64>,
    pub r: Vec<Vec<f64>>,
}

/// Coefficients of the deviation channel in the general-moment family.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationDynamics {
    pub a: Vec<f64>,
    pub b: Vec<Vec<f64>>,
}

/// A fully materialized problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: Option<String>,
    pub family: Family,
    pub agents: usize,
    pub horizon: usize,
    /// Mean-cost half order: costs carry `x̄^{2p}`, `ū^{2p}`.
    pub p: u32,
    /// Moment half order (general-moment family only).
    pub o: Option<u32>,
    pub a_bar: Vec<f64>,
    /// `b_bar[i][k]`.
    pub b_bar: Vec<Vec<f64>>,
    pub deviation_dynamics: Option<DeviationDynamics>,
    pub mean_weights: Weights,
    /// Variance / moment weights (stochastic families).
    pub dev_weights: Option<Weights>,
    pub noise: Option<NoiseSpec>,
    pub x0: InitialLaw,
    pub mc: MonteCarloConfig,
}

impl Scenario {
    /// Order of the central moment penalized in the deviation channel:
    /// 2 for the variance-aware families, `2o` for the general-moment family,
    /// 0 for the deterministic family.
    pub fn moment_order(&self) -> u32 {
        match self.family {
            Family::Deterministic2p => 0,
            Family::AdditiveVariance2p | Family::MultiplicativeVariance2p => 2,
            Family::GeneralMoment2o2p => 2 * self.o.unwrap_or(1),
        }
    }

    /// Coefficient multiplying `x_k - x̄_k` in the deviation feedback law.
    pub fn deviation_drift(&self, k: usize) -> f64 {
        match (&self.family, &self.deviation_dynamics) {
            (Family::GeneralMoment2o2p, Some(dd)) => dd.a[k],
            _ => self.a_bar[k],
        }
    }

    /// Input coefficients of the deviation channel for agent `i` at step `k`.
    pub fn deviation_input(&self, i: usize, k: usize) -> f64 {
        match (&self.family, &self.deviation_dynamics) {
            (Family::GeneralMoment2o2p, Some(dd)) => dd.b[i][k],
            _ => self.b_bar[i][k],
        }
    }

    /// Copy with the noise removed and the deviation channel dropped.
    pub fn deterministic_part(&self) -> Scenario {
        Scenario {
            family: Family::Deterministic2p,
            o: None,
            deviation_dynamics: None,
            dev_weights: None,
            noise: None,
            x0: InitialLaw::deterministic(self.x0.mean),
            mc: MonteCarloConfig {
                paths: 0,
                ..self.mc
            },
            ..self.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Document layer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum Steps {
    Scalar(f64),
    Seq(Vec<f64>),
}

impl Steps {
    fn materialize(self, horizon: usize) -> Vec<f64> {
        match self {
            Steps::Scalar(v) => vec![v; horizon],
            Steps::Seq(v) => v,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum PerAgent {
    Uniform(f64),
    Agents(Vec<Steps>),
}

impl PerAgent {
    fn materialize(self, agents: usize, horizon: usize) -> Vec<Vec<f64>> {
        match self {
            PerAgent::Uniform(v) => vec![vec![v; horizon]; agents],
            PerAgent::Agents(list) => list.into_iter().map(|s| s.materialize(horizon)).collect(),
        }
    }

    fn from_table(table: &[Vec<f64>]) -> Self {
        PerAgent::Agents(table.iter().map(|row| Steps::Seq(row.clone())).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum AgentScalars {
    Uniform(f64),
    Agents(Vec<f64>),
}

impl AgentScalars {
    fn materialize(self, agents: usize) -> Vec<f64> {
        match self {
            AgentScalars::Uniform(v) => vec![v; agents],
            AgentScalars::Agents(v) => v,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum MomentTable {
    Shared(Vec<f64>),
    PerStep(Vec<Vec<f64>>),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    family: Family,
    agents: usize,
    horizon: usize,
    p: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    o: Option<u32>,
    dynamics: DynamicsDoc,
    weights: WeightsDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise: Option<NoiseDoc>,
    initial: InitialDoc,
    #[serde(default)]
    monte_carlo: MonteCarloDoc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DynamicsDoc {
    a_bar: Steps,
    b_bar: PerAgent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a: Option<Steps>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<PerAgent>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsDoc {
    q_bar: PerAgent,
    q_bar_terminal: AgentScalars,
    r_bar: PerAgent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q: Option<PerAgent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q_terminal: Option<AgentScalars>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r: Option<PerAgent>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseDoc {
    kind: NoiseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<Steps>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    moments: Option<MomentTable>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialDoc {
    kind: InitialKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    samples: Option<Vec<f64>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MonteCarloDoc {
    #[serde(default)]
    paths: u64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    stream_scheme: StreamScheme,
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Schema(msg.into())
}

/// Parses, materializes and validates a scenario document.
pub fn load_scenario(text: &str) -> Result<Scenario> {
    let table = parse_table(text)?;
    scenario_from_table(table)
}

/// Syntax-level parse into a TOML table.
pub fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| {
        let (line, column) = e
            .span()
            .map(|span| line_col(text, span.start))
            .unwrap_or((0, 0));
        Error::Syntax {
            line,
            column,
            message: e.message().to_string(),
        }
    })
}

/// Schema check, broadcast and validation of an already parsed table.
pub fn scenario_from_table(table: toml::Table) -> Result<Scenario> {
    let doc = Document::deserialize(table).map_err(|e| schema(e.message().to_string()))?;
    let scenario = materialize(doc)?;
    let diagnostics = validate(&scenario);
    if diagnostics.is_empty() {
        Ok(scenario)
    } else {
        Err(Error::Validation(diagnostics))
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

fn materialize(doc: Document) -> Result<Scenario> {
    let Document {
        name,
        family,
        agents,
        horizon,
        p,
        o,
        dynamics,
        weights,
        noise,
        initial,
        monte_carlo,
    } = doc;
    let stochastic = family.is_stochastic();
    let general = family == Family::GeneralMoment2o2p;
    let family_name = family.config_name();

    if !stochastic && noise.is_some() {
        return Err(schema(format!(
            "family `{family_name}` does not accept a [noise] table"
        )));
    }
    if stochastic && noise.is_none() {
        return Err(schema(format!(
            "family `{family_name}` requires a [noise] table"
        )));
    }
    if general != o.is_some() {
        return Err(schema(if general {
            "family `general-moment` requires `o`".to_string()
        } else {
            format!("family `{family_name}` does not accept `o`")
        }));
    }
    if general != (dynamics.a.is_some() || dynamics.b.is_some())
        || (general && (dynamics.a.is_none() || dynamics.b.is_none()))
    {
        return Err(schema(if general {
            "family `general-moment` requires `dynamics.a` and `dynamics.b`".to_string()
        } else {
            format!("family `{family_name}` does not accept `dynamics.a` / `dynamics.b`")
        }));
    }
    let dev_given = [
        weights.q.is_some(),
        weights.q_terminal.is_some(),
        weights.r.is_some(),
    ];
    if stochastic && dev_given.iter().any(|g| !g) {
        return Err(schema(format!(
            "family `{family_name}` requires `weights.q`, `weights.q_terminal` and `weights.r`"
        )));
    }
    if !stochastic && dev_given.iter().any(|g| *g) {
        return Err(schema(format!(
            "family `{family_name}` does not accept deviation weights `q`, `q_terminal`, `r`"
        )));
    }

    let mean_weights = Weights {
        q: weights.q_bar.materialize(agents, horizon),
        q_terminal: weights.q_bar_terminal.materialize(agents),
        r: weights.r_bar.materialize(agents, horizon),
    };
    let dev_weights = match (weights.q, weights.q_terminal, weights.r) {
        (Some(q), Some(qt), Some(r)) => Some(Weights {
            q: q.materialize(agents, horizon),
            q_terminal: qt.materialize(agents),
            r: r.materialize(agents, horizon),
        }),
        _ => None,
    };
    let deviation_dynamics = match (dynamics.a, dynamics.b) {
        (Some(a), Some(b)) => Some(DeviationDynamics {
            a: a.materialize(horizon),
            b: b.materialize(agents, horizon),
        }),
        _ => None,
    };

    let noise = noise.map(|n| materialize_noise(n, horizon)).transpose()?;
    let x0 = materialize_initial(initial)?;

    Ok(Scenario {
        name,
        family,
        agents,
        horizon,
        p,
        o,
        a_bar: dynamics.a_bar.materialize(horizon),
        b_bar: dynamics.b_bar.materialize(agents, horizon),
        deviation_dynamics,
        mean_weights,
        dev_weights,
        noise,
        x0,
        mc: MonteCarloConfig {
            paths: monte_carlo.paths,
            seed: monte_carlo.seed,
            stream_scheme: monte_carlo.stream_scheme,
        },
    })
}

fn materialize_noise(doc: NoiseDoc, horizon: usize) -> Result<NoiseSpec> {
    let explicit = doc.kind == NoiseKind::ExplicitMoments;
    if explicit && doc.moments.is_none() {
        return Err(schema("noise kind `explicit-moments` requires `moments`"));
    }
    if !explicit && doc.moments.is_some() {
        return Err(schema(
            "`moments` is only accepted with noise kind `explicit-moments`",
        ));
    }
    if !explicit && doc.sigma.is_none() {
        return Err(schema("noise requires `sigma`"));
    }
    let moments = doc.moments.map(|m| match m {
        MomentTable::Shared(row) => vec![row; horizon],
        MomentTable::PerStep(rows) => rows,
    });
    Ok(NoiseSpec {
        kind: doc.kind,
        sigma: doc
            .sigma
            .map(|s| s.materialize(horizon))
            .unwrap_or_default(),
        moments,
    })
}

fn materialize_initial(doc: InitialDoc) -> Result<InitialLaw> {
    match doc.kind {
        InitialKind::Deterministic => {
            if doc.samples.is_some() {
                return Err(schema(
                    "initial kind `deterministic` does not accept `samples`",
                ));
            }
            let mean = doc
                .mean
                .or(doc.value)
                .ok_or_else(|| schema("initial law requires `mean`"))?;
            Ok(InitialLaw {
                kind: InitialKind::Deterministic,
                mean,
                value: doc.value,
                variance: doc.variance.unwrap_or(0.0),
                samples: None,
            })
        }
        InitialKind::GaussianAroundMean => {
            if doc.samples.is_some() || doc.value.is_some() {
                return Err(schema(
                    "initial kind `gaussian-around-mean` accepts only `mean` and `variance`",
                ));
            }
            Ok(InitialLaw {
                kind: InitialKind::GaussianAroundMean,
                mean: doc
                    .mean
                    .ok_or_else(|| schema("initial law requires `mean`"))?,
                value: None,
                variance: doc.variance.ok_or_else(|| {
                    schema("initial kind `gaussian-around-mean` requires `variance`")
                })?,
                samples: None,
            })
        }
        InitialKind::EmpiricalSamples => {
            if doc.value.is_some() || doc.variance.is_some() {
                return Err(schema(
                    "initial kind `empirical-samples` derives its variance from `samples`; \
                     `value` and `variance` are not accepted",
                ));
            }
            let samples = doc
                .samples
                .ok_or_else(|| schema("initial kind `empirical-samples` requires `samples`"))?;
            let average = if samples.is_empty() {
                0.0
            } else {
                samples.iter().sum::<f64>() / samples.len() as f64
            };
            let mut law = InitialLaw {
                kind: InitialKind::EmpiricalSamples,
                mean: doc.mean.unwrap_or(average),
                value: None,
                variance: 0.0,
                samples: Some(samples),
            };
            law.variance = law.central_moment(2);
            Ok(law)
        }
    }
}

/// Serializes a scenario to its configuration document. Every sequence is
/// written out in full.
pub fn serialize_scenario(s: &Scenario) -> Result<String> {
    let doc = Document {
        name: s.name.clone(),
        family: s.family,
        agents: s.agents,
        horizon: s.horizon,
        p: s.p,
        o: s.o,
        dynamics: DynamicsDoc {
            a_bar: Steps::Seq(s.a_bar.clone()),
            b_bar: PerAgent::from_table(&s.b_bar),
            a: s.deviation_dynamics
                .as_ref()
                .map(|d| Steps::Seq(d.a.clone())),
            b: s.deviation_dynamics
                .as_ref()
                .map(|d| PerAgent::from_table(&d.b)),
        },
        weights: WeightsDoc {
            q_bar: PerAgent::from_table(&s.mean_weights.q),
            q_bar_terminal: AgentScalars::Agents(s.mean_weights.q_terminal.clone()),
            r_bar: PerAgent::from_table(&s.mean_weights.r),
            q: s.dev_weights.as_ref().map(|w| PerAgent::from_table(&w.q)),
            q_terminal: s
                .dev_weights
                .as_ref()
                .map(|w| AgentScalars::Agents(w.q_terminal.clone())),
            r: s.dev_weights.as_ref().map(|w| PerAgent::from_table(&w.r)),
        },
        noise: s.noise.as_ref().map(|n| NoiseDoc {
            kind: n.kind,
            sigma: (n.kind != NoiseKind::ExplicitMoments || !n.sigma.is_empty())
                .then(|| Steps::Seq(n.sigma.clone())),
            moments: n.moments.clone().map(MomentTable::PerStep),
        }),
        initial: InitialDoc {
            kind: s.x0.kind,
            mean: Some(s.x0.mean),
            value: s.x0.value,
            variance: match s.x0.kind {
                InitialKind::EmpiricalSamples => None,
                _ => Some(s.x0.variance),
            },
            samples: s.x0.samples.clone(),
        },
        monte_carlo: MonteCarloDoc {
            paths: s.mc.paths,
            seed: s.mc.seed,
            stream_scheme: s.mc.stream_scheme,
        },
    };
    toml::to_string(&doc).map_err(|e| Error::Schema(format!("cannot serialize scenario: {e}")))
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Checks every shape, positivity and consistency condition. Returns one
/// diagnostic per violation; an empty list means the scenario is usable.
pub fn validate(s: &Scenario) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let n = s.horizon;
    let agents = s.agents;

    if agents == 0 {
        out.push(Diagnostic::new(
            Condition::Dimensions,
            "agents must be >= 1",
        ));
    }
    if n == 0 {
        out.push(Diagnostic::new(
            Condition::Dimensions,
            "horizon must be >= 1",
        ));
    }
    if s.p == 0 {
        out.push(Diagnostic::new(Condition::Dimensions, "p must be >= 1"));
    }
    if s.p > 64 {
        out.push(Diagnostic::new(Condition::Dimensions, "p must be <= 64"));
    }
    match (s.family, s.o) {
        (Family::GeneralMoment2o2p, None) => out.push(Diagnostic::new(
            Condition::FamilyFields,
            "general-moment family requires o",
        )),
        (Family::GeneralMoment2o2p, Some(o)) if o == 0 || o > 64 => out.push(Diagnostic::new(
            Condition::Dimensions,
            "o must be in 1..=64",
        )),
        (Family::GeneralMoment2o2p, _) => {}
        (_, Some(_)) => out.push(Diagnostic::new(
            Condition::FamilyFields,
            format!("family {} does not use o", s.family.config_name()),
        )),
        _ => {}
    }

    check_steps(&mut out, "a_bar", &s.a_bar, n, Positivity::Free);
    check_table(&mut out, "b_bar", &s.b_bar, agents, n, Positivity::Free);
    check_weights(&mut out, "", &s.mean_weights, agents, n);

    let stochastic = s.family.is_stochastic();
    let general = s.family == Family::GeneralMoment2o2p;

    match (&s.deviation_dynamics, general) {
        (Some(dd), true) => {
            check_steps(&mut out, "a", &dd.a, n, Positivity::Free);
            check_table(&mut out, "b", &dd.b, agents, n, Positivity::Free);
        }
        (None, true) => out.push(Diagnostic::new(
            Condition::FamilyFields,
            "general-moment family requires deviation dynamics a, b",
        )),
        (Some(_), false) => out.push(Diagnostic::new(
            Condition::FamilyFields,
            format!(
                "family {} does not use deviation dynamics",
                s.family.config_name()
            ),
        )),
        (None, false) => {}
    }

    match (&s.dev_weights, stochastic) {
        (Some(w), true) => check_weights(&mut out, "dev ", w, agents, n),
        (None, true) => out.push(Diagnostic::new(
            Condition::FamilyFields,
            format!(
                "family {} requires deviation weights q, r",
                s.family.config_name()
            ),
        )),
        (Some(_), false) => out.push(Diagnostic::new(
            Condition::FamilyFields,
            "deterministic family does not use deviation weights",
        )),
        (None, false) => {}
    }

    match (&s.noise, stochastic) {
        (Some(noise), true) => check_noise(&mut out, noise, n, s.moment_order()),
        (None, true) => out.push(Diagnostic::new(
            Condition::FamilyFields,
            format!(
                "family {} requires a noise specification",
                s.family.config_name()
            ),
        )),
        (Some(_), false) => out.push(Diagnostic::new(
            Condition::FamilyFields,
            "deterministic family forbids a noise specification",
        )),
        (None, false) => {}
    }

    check_initial(&mut out, &s.x0);
    if !stochastic && (s.x0.kind != InitialKind::Deterministic || s.x0.atom() != s.x0.mean) {
        out.push(Diagnostic::new(
            Condition::FamilyFields,
            "deterministic family needs a deterministic initial law at the mean",
        ));
    }
    out
}

#[derive(Clone, Copy, PartialEq)]
enum Positivity {
    Strict,
    Free,
}

fn check_value(out: &mut Vec<Diagnostic>, label: &str, v: f64, pos: Positivity) {
    if !v.is_finite() {
        out.push(Diagnostic::new(
            Condition::BoundedCoefficients,
            format!("{label} is not finite ({v})"),
        ));
    } else if pos == Positivity::Strict && v <= 0.0 {
        out.push(Diagnostic::new(
            Condition::WeightPositivity,
            format!("{label} = {v} must be > 0"),
        ));
    }
}

fn check_steps(out: &mut Vec<Diagnostic>, name: &str, seq: &[f64], n: usize, pos: Positivity) {
    if seq.len() != n {
        out.push(Diagnostic::new(
            Condition::LengthMismatch,
            format!("{name} has {} entries, horizon is {n}", seq.len()),
        ));
    }
    for (k, &v) in seq.iter().enumerate() {
        check_value(out, &format!("{name}[step {k}]"), v, pos);
    }
}

fn check_table(
    out: &mut Vec<Diagnostic>,
    name: &str,
    table: &[Vec<f64>],
    agents: usize,
    n: usize,
    pos: Positivity,
) {
    if table.len() != agents {
        out.push(Diagnostic::new(
            Condition::LengthMismatch,
            format!("{name} has {} agent rows, expected {agents}", table.len()),
        ));
    }
    for (i, row) in table.iter().enumerate() {
        check_steps(out, &format!("{name}[agent {}]", i + 1), row, n, pos);
    }
}

fn check_weights(out: &mut Vec<Diagnostic>, prefix: &str, w: &Weights, agents: usize, n: usize) {
    let (q, qt, r) = if prefix.is_empty() {
        ("q_bar", "q_bar_terminal", "r_bar")
    } else {
        ("q", "q_terminal", "r")
    };
    check_table(out, q, &w.q, agents, n, Positivity::Strict);
    check_table(out, r, &w.r, agents, n, Positivity::Strict);
    if w.q_terminal.len() != agents {
        out.push(Diagnostic::new(
            Condition::LengthMismatch,
            format!("{qt} has {} entries, expected {agents}", w.q_terminal.len()),
        ));
    }
    for (i, &v) in w.q_terminal.iter().enumerate() {
        check_value(
            out,
            &format!("{qt}[agent {}]", i + 1),
            v,
            Positivity::Strict,
        );
    }
}

fn check_noise(out: &mut Vec<Diagnostic>, noise: &NoiseSpec, n: usize, order: u32) {
    if noise.kind == NoiseKind::ExplicitMoments {
        let Some(rows) = &noise.moments else {
            out.push(Diagnostic::new(
                Condition::MissingMomentOrder,
                "explicit-moments noise has no moment table",
            ));
            return;
        };
        if rows.len() != n {
            out.push(Diagnostic::new(
                Condition::LengthMismatch,
                format!("moment table has {} rows, horizon is {n}", rows.len()),
            ));
        }
        let needed = (order.max(2) / 2) as usize;
        for (k, row) in rows.iter().enumerate() {
            if row.len() < needed {
                out.push(Diagnostic::new(
                    Condition::MissingMomentOrder,
                    format!("moment table row {k} lacks order {}", 2 * needed),
                ));
            }
            for (j, &m) in row.iter().enumerate() {
                if !m.is_finite() || m < 0.0 {
                    out.push(Diagnostic::new(
                        Condition::NoiseSchedule,
                        format!(
                            "moment of order {} at step {k} is {m}, must be >= 0",
                            2 * (j + 1)
                        ),
                    ));
                }
            }
        }
        if !noise.sigma.is_empty() {
            check_sigma(out, &noise.sigma, n);
        }
    } else {
        if noise.moments.is_some() {
            out.push(Diagnostic::new(
                Condition::NoiseSchedule,
                "moment table given for a noise kind with a built-in law",
            ));
        }
        check_sigma(out, &noise.sigma, n);
    }
}

fn check_sigma(out: &mut Vec<Diagnostic>, sigma: &[f64], n: usize) {
    if sigma.len() != n {
        out.push(Diagnostic::new(
            Condition::LengthMismatch,
            format!("sigma has {} entries, horizon is {n}", sigma.len()),
        ));
    }
    for (k, &s) in sigma.iter().enumerate() {
        if !s.is_finite() || s < 0.0 {
            out.push(Diagnostic::new(
                Condition::NoiseSchedule,
                format!("sigma[step {k}] = {s} must be finite and >= 0"),
            ));
        }
    }
}

fn check_initial(out: &mut Vec<Diagnostic>, x0: &InitialLaw) {
    if !x0.mean.is_finite() {
        out.push(Diagnostic::new(
            Condition::InitialLaw,
            "initial mean is not finite",
        ));
    }
    match x0.kind {
        InitialKind::Deterministic => {
            if x0.variance != 0.0 {
                out.push(Diagnostic::new(
                    Condition::InitialLaw,
                    "deterministic initial law must have variance 0",
                ));
            }
            if x0.value.is_some_and(|v| !v.is_finite()) {
                out.push(Diagnostic::new(
                    Condition::InitialLaw,
                    "initial value is not finite",
                ));
            }
            if x0.samples.is_some() {
                out.push(Diagnostic::new(
                    Condition::InitialLaw,
                    "deterministic initial law carries samples",
                ));
            }
        }
        InitialKind::GaussianAroundMean => {
            if !x0.variance.is_finite() || x0.variance < 0.0 {
                out.push(Diagnostic::new(
                    Condition::InitialLaw,
                    format!("initial variance {} must be finite and >= 0", x0.variance),
                ));
            }
        }
        InitialKind::EmpiricalSamples => match &x0.samples {
            Some(s) if !s.is_empty() && s.iter().all(|v| v.is_finite()) => {
                let centered = x0.centered_samples();
                let avg = centered.iter().sum::<f64>() / centered.len() as f64;
                if (avg - x0.mean).abs() > 1e-12 * (1.0 + x0.mean.abs()) {
                    out.push(Diagnostic::new(
                        Condition::InitialLaw,
                        "recentered samples do not average to the initial mean",
                    ));
                }
            }
            _ => out.push(Diagnostic::new(
                Condition::InitialLaw,
                "empirical initial law needs a non-empty list of finite samples",
            )),
        },
    }
}
