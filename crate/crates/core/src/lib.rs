//! Solver, simulator and equilibrium checks for finite-horizon discrete-time
//! mean-field-type games with even power-law costs.

pub mod error;
pub mod numerics;
pub mod recursion;
pub mod scenario;
pub mod simulate;
pub mod verify;

pub use error::{Condition, Diagnostic, Error, Result};
pub use numerics::{signed_root, solve_linear, SmallMatrix};
pub use recursion::{
    solve, solve_additive, solve_deterministic, solve_general_moment, solve_general_moment_with,
    solve_multiplicative, stationarity_residual, CoefficientTable, GainSchedule,
    MomentRecursionForm,
};
pub use scenario::{
    load_scenario, serialize_scenario, validate, Family, InitialKind, InitialLaw, MonteCarloConfig,
    NoiseKind, NoiseSpec, Scenario, Weights,
};
pub use simulate::{
    evaluate_cost, propagate_mean, run_ensemble, run_ensemble_with, CostBreakdown, CostSource,
    Ensemble, EnsembleOptions, MeanPath,
};
pub use verify::{
    bellman_identity_check, brute_force_one_step, lq_reduction_check, unilateral_deviation_test,
    verify, verify_solution, GridSpec, OneStepInstance, VerificationReport, VerifyOptions,
};
