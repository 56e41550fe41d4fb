use std::fmt;

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes surfaced by loading, solving, simulating and verifying.
#[derive(Debug, Error)]
pub enum Error {
    /// The configuration text is not well-formed.
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    /// Well-formed document with missing, unknown or incompatible fields.
    #[error("schema error: {0}")]
    Schema(String),

    /// The scenario is structurally complete but breaks one or more conditions.
    #[error("validation failed: {}", join_diagnostics(.0))]
    Validation(Vec<Diagnostic>),

    /// A numeric kernel was called outside its domain.
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// A coupling matrix is singular (or numerically so) and gains do not exist.
    #[error("singular coupling matrix{}: pivot {pivot:.3e} below threshold {threshold:.3e}", fmt_context(.context))]
    Singular {
        pivot: f64,
        threshold: f64,
        context: Option<String>,
    },

    /// A backward coefficient left the representable range.
    #[error("coefficient overflow: {what} for agent {agent} at step {step} reached {value:e}")]
    Overflow {
        what: &'static str,
        agent: usize,
        step: usize,
        value: f64,
    },

    /// An explicit moment table does not provide a requested order.
    #[error("noise moment of order {order} missing for step {step}")]
    MissingMoment { step: usize, order: u32 },

    /// Operation invoked on an input it does not accept.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// Requested work exceeds the configured memory budget.
    #[error("resource limit exceeded: {0}")]
    Resource(String),
}

impl Error {
    pub(crate) fn with_context(self, ctx: impl Into<String>) -> Self {
        match self {
            Error::Singular {
                pivot, threshold, ..
            } => Error::Singular {
                pivot,
                threshold,
                context: Some(ctx.into()),
            },
            other => other,
        }
    }
}

fn fmt_context(ctx: &Option<String>) -> String {
    match ctx {
        Some(c) => format!(" ({c})"),
        None => String::new(),
    }
}

fn join_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// The precondition a diagnostic refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    /// Every cost weight must be strictly positive.
    WeightPositivity,
    /// Dynamics coefficients must be finite.
    BoundedCoefficients,
    /// Per-step sequences must have the horizon length, per-agent tables the agent count.
    LengthMismatch,
    /// Family requires (or forbids) a field.
    FamilyFields,
    /// Noise schedule entries must be finite and nonnegative.
    NoiseSchedule,
    /// An explicit moment table lacks an order the family needs.
    MissingMomentOrder,
    /// The initial law is inconsistent.
    InitialLaw,
    /// Horizon, agent count or cost orders out of range.
    Dimensions,
}

impl Condition {
    pub fn label(self) -> &'static str {
        match self {
            Condition::WeightPositivity => "weight positivity violated",
            Condition::BoundedCoefficients => "bounded coefficients violated",
            Condition::LengthMismatch => "length mismatch",
            Condition::FamilyFields => "family field combination invalid",
            Condition::NoiseSchedule => "noise schedule invalid",
            Condition::MissingMomentOrder => "missing moment order",
            Condition::InitialLaw => "initial law inconsistent",
            Condition::Dimensions => "dimension out of range",
        }
    }
}

/// One violated condition found by [`crate::scenario::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub condition: Condition,
    pub detail: String,
}

impl Diagnostic {
    pub fn new(condition: Condition, detail: impl Into<String>) -> Self {
        Self {
            condition,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.condition.label(), self.detail)
    }
}
