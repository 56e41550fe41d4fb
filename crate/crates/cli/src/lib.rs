//! Command-line front end: solve, simulate, verify and sweep scenario files.
//!
//! Every command reads one scenario file and writes CSV tables plus a
//! `manifest.txt` into an output directory. Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | usage error (bad flags, empty sweep list) |
//! | 2 | scenario unreadable or not parseable |
//! | 3 | scenario fails validation |
//! | 4 | singular coupling matrix or coefficient overflow |
//! | 5 | resource limit or output write failure |
//! | 6 | verification failed |

pub mod output;
pub mod plot;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mftg_core::recursion::CoefficientTable;
use mftg_core::scenario::{parse_table, scenario_from_table};
use mftg_core::simulate::Ensemble;
use mftg_core::verify::{PerturbationMode, BELLMAN_TOL, STATIONARITY_TOL, SUBGAME_TOL};
use mftg_core::{
    evaluate_cost, load_scenario, propagate_mean, run_ensemble_with, serialize_scenario, solve,
    verify_solution, CostBreakdown, CostSource, EnsembleOptions, Error, GainSchedule, MeanPath,
    Scenario, VerificationReport, VerifyOptions,
};
use rayon::prelude::*;
use thiserror::Error;

use output::{num, opt_num, Csv, OutputDir, RunManifest};
use plot::{Chart, Series};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("cannot read {}: {source}", path.display())]
    Read { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Core(#[from] Error),

    #[error("cannot write {}: {source}", path.display())]
    Write { path: PathBuf, source: io::Error },

    #[error("verification failed: {}", .0.join("; "))]
    Verification(Vec<String>),

    #[error("sweep: {} of {total} runs failed", .failures.len())]
    Sweep {
        failures: Vec<String>,
        total: usize,
        code: u8,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Read { .. } => 2,
            CliError::Core(e) => core_exit_code(e),
            CliError::Write { .. } => 5,
            CliError::Verification(_) => 6,
            CliError::Sweep { code, .. } => *code,
        }
    }

    /// Lines for standard error, one finding per line.
    pub fn report(&self) -> Vec<String> {
        match self {
            CliError::Core(Error::Validation(diags)) => {
                let mut out = vec!["error: scenario validation failed".to_string()];
                out.extend(diags.iter().map(|d| format!("  {d}")));
                out
            }
            CliError::Verification(failures) => {
                let mut out = vec!["error: verification failed".to_string()];
                out.extend(failures.iter().map(|f| format!("  {f}")));
                out
            }
            CliError::Sweep { failures, .. } => {
                let mut out = vec![format!("error: {self}")];
                out.extend(failures.iter().map(|f| format!("  {f}")));
                out
            }
            other => vec![format!("error: {other}")],
        }
    }
}

pub fn core_exit_code(e: &Error) -> u8 {
    match e {
        Error::Syntax { .. } | Error::Schema(_) => 2,
        Error::Validation(_) | Error::MissingMoment { .. } | Error::Precondition(_) => 3,
        Error::Singular { .. } | Error::Overflow { .. } | Error::NumericDomain(_) => 4,
        Error::Resource(_) => 5,
    }
}

type CliResult<T> = Result<T, CliError>;

// ---------------------------------------------------------------------------
// Arguments
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "mftg",
    version,
    about = "Solve, simulate and verify mean-field-type games"
)]
pub struct Cli {
    /// Worker threads for Monte Carlo and sweep jobs (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Backward recursion: coefficients.csv and gains.csv.
    Solve(SolveArgs),
    /// Mean path, Monte Carlo ensemble and realized costs.
    Simulate(SimulateArgs),
    /// Equilibrium checks: report.csv and summary.txt.
    Verify(VerifyArgs),
    /// Solve and simulate over a grid of parameter overrides.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Scenario file (TOML).
    pub scenario: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: Common,
    /// Also write coefficients.svg.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub opts: SimulateOptions,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SimulateOptions {
    /// Number of Monte Carlo paths (default: from the scenario).
    #[arg(long)]
    pub paths: Option<u64>,
    /// Master seed (default: from the scenario).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write state.svg, controls.svg and coefficients.svg.
    #[arg(long)]
    pub plot: bool,
    /// Keep every path and write trajectories.csv.
    #[arg(long)]
    pub store_paths: bool,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub opts: VerifyFlags,
}

#[derive(Debug, Clone, Default, Args)]
pub struct VerifyFlags {
    /// Deviation grid as POINTS or POINTS:SPAN (default 101:0.2).
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<(usize, f64)>,
    /// Random probes per step for the Bellman identity.
    #[arg(long)]
    pub probes: Option<usize>,
    /// Paths for Monte Carlo deviation probes.
    #[arg(long)]
    pub paths: Option<u64>,
    /// Seed for Monte Carlo deviation probes (default: from the scenario).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Test hook: scale agent AGENT's mean gain at STEP (or `*`) by FACTOR.
    #[arg(long = "inject-gain", value_parser = parse_injection)]
    pub inject_gain: Vec<GainInjection>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Override KEY=V1,V2,... where KEY is a dotted path into the scenario file.
    #[arg(long = "param", required = true)]
    pub params: Vec<String>,
    #[arg(long)]
    pub paths: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_grid(s: &str) -> Result<(usize, f64), String> {
    let (points, span) = match s.split_once(':') {
        Some((p, sp)) => (p, Some(sp)),
        None => (s, None),
    };
    let points: usize = points
        .trim()
        .parse()
        .map_err(|_| format!("grid points `{points}` is not a count"))?;
    if points < 2 {
        return Err("grid needs at least 2 points".into());
    }
    let span = match span {
        Some(sp) => sp
            .trim()
            .parse::<f64>()
            .map_err(|_| format!("grid span `{sp}` is not a number"))?,
        None => 0.2,
    };
    if !(span > 0.0 && span < 1.0) {
        return Err(format!("grid span {span} must lie in (0, 1)"));
    }
    Ok((points, span))
}

/// One `--inject-gain` override; `agent` is 1-based, `step: None` means every step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainInjection {
    pub agent: usize,
    pub step: Option<usize>,
    pub factor: f64,
}

fn parse_injection(s: &str) -> Result<GainInjection, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [agent, step, factor] = parts[..] else {
        return Err("expected AGENT:STEP:FACTOR".into());
    };
    let agent: usize = agent
        .parse()
        .map_err(|_| format!("agent `{agent}` is not a positive integer"))?;
    if agent == 0 {
        return Err("agents are numbered from 1".into());
    }
    let step = match step {
        "*" => None,
        k => Some(
            k.parse()
                .map_err(|_| format!("step `{k}` is not an integer or `*`"))?,
        ),
    };
    let factor: f64 = factor
        .parse()
        .map_err(|_| format!("factor `{factor}` is not a number"))?;
    if !factor.is_finite() {
        return Err("factor must be finite".into());
    }
    Ok(GainInjection {
        agent,
        step,
        factor,
    })
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// What a successful command produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
    pub summary: Vec<String>,
}

pub fn run(cli: &Cli) -> CliResult<Outcome> {
    match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Core(Error::Resource(e.to_string())))?;
            pool.install(|| dispatch(&cli.command))
        }
        None => dispatch(&cli.command),
    }
}

fn dispatch(cmd: &Command) -> CliResult<Outcome> {
    match cmd {
        Command::Solve(a) => cmd_solve(&a.common.scenario, &a.common.out, a.plot),
        Command::Simulate(a) => cmd_simulate(&a.common.scenario, &a.common.out, &a.opts),
        Command::Verify(a) => cmd_verify(&a.common.scenario, &a.common.out, &a.opts),
        Command::Sweep(a) => {
            let params = a
                .params
                .iter()
                .map(|p| parse_param(p))
                .collect::<CliResult<Vec<_>>>()?;
            let opts = SimulateOptions {
                paths: a.paths,
                seed: a.seed,
                ..SimulateOptions::default()
            };
            cmd_sweep(&a.common.scenario, &params, &a.common.out, &opts)
        }
    }
}

// ---------------------------------------------------------------------------
// Shared pieces
// ---------------------------------------------------------------------------

struct Loaded {
    text: String,
    digest: String,
}

fn read_scenario(path: &Path) -> CliResult<Loaded> {
    let bytes = fs::read(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let digest = output::sha256_hex(&bytes);
    let text = String::from_utf8(bytes).map_err(|e| {
        CliError::Core(Error::Syntax {
            line: 1,
            column: 1,
            message: format!("not UTF-8 text: {e}"),
        })
    })?;
    Ok(Loaded { text, digest })
}

fn open_out(dir: &Path) -> CliResult<OutputDir> {
    OutputDir::create(dir).map_err(|source| CliError::Write {
        path: dir.to_path_buf(),
        source,
    })
}

fn put(out: &mut OutputDir, name: &str, bytes: &[u8]) -> CliResult<()> {
    out.write(name, bytes).map_err(|source| CliError::Write {
        path: out.root().join(name),
        source,
    })
}

fn finish(
    mut out: OutputDir,
    mut manifest: RunManifest,
    warnings: Vec<String>,
    summary: Vec<String>,
) -> CliResult<Outcome> {
    manifest.files = out.files().to_vec();
    manifest.finished = output::unix_now();
    put(&mut out, "manifest.txt", manifest.render().as_bytes())?;
    Ok(Outcome {
        files: out.paths(),
        warnings,
        summary,
    })
}

fn manifest(command: &str, scenario: &Path, digest: &str) -> RunManifest {
    RunManifest {
        command: command.into(),
        scenario: scenario.display().to_string(),
        scenario_sha256: digest.into(),
        seed: None,
        paths: None,
        started: output::unix_now(),
        finished: 0,
        files: Vec::new(),
        extra: Vec::new(),
    }
}

pub fn coefficients_csv(s: &Scenario, table: &CoefficientTable) -> Csv {
    let mut csv = Csv::new(&["k", "agent", "alpha_bar", "alpha", "gamma_bar"]);
    for k in 0..=s.horizon {
        for i in 0..s.agents {
            csv.row(&[
                k.to_string(),
                (i + 1).to_string(),
                num(table.alpha_bar[i][k]),
                opt_num(table.alpha.as_ref().map(|t| t[i][k])),
                opt_num(table.gamma_bar.as_ref().map(|t| t[i][k])),
            ]);
        }
    }
    csv
}

pub fn gains_csv(s: &Scenario, gains: &GainSchedule) -> Csv {
    let mut csv = Csv::new(&[
        "k",
        "agent",
        "mean_gain",
        "dev_gain",
        "c_bar",
        "c",
        "closed_loop_mean",
        "closed_loop_dev",
    ]);
    for k in 0..s.horizon {
        for i in 0..s.agents {
            csv.row(&[
                k.to_string(),
                (i + 1).to_string(),
                num(gains.mean_gain[i][k]),
                opt_num(gains.dev_gain.as_ref().map(|g| g[i][k])),
                num(gains.c_bar[i][k]),
                opt_num(gains.c_dev.as_ref().map(|c| c[i][k])),
                num(gains.closed_loop_mean[k]),
                opt_num(gains.closed_loop_dev.as_ref().map(|c| c[k])),
            ]);
        }
    }
    csv
}

fn meanpath_csv(s: &Scenario, mean: &MeanPath) -> Csv {
    let mut header = vec!["k".to_string(), "x_bar".to_string()];
    header.extend((1..=s.agents).map(|i| format!("u_bar_{i}")));
    let mut csv = Csv::new(&header);
    for k in 0..=s.horizon {
        let mut row = vec![k.to_string(), num(mean.x_bar[k])];
        row.extend((0..s.agents).map(|i| opt_num(mean.u_bar[i].get(k).copied())));
        csv.row(&row);
    }
    csv
}

fn ensemble_stats_csv(s: &Scenario, e: &Ensemble) -> Csv {
    let mut csv = Csv::new(&["k", "emp_mean", "emp_var", "emp_moment_2o"]);
    for k in 0..=s.horizon {
        csv.row(&[
            k.to_string(),
            num(e.empirical_mean[k]),
            num(e.empirical_variance[k]),
            num(e.empirical_moment[k]),
        ]);
    }
    csv
}

fn costs_csv(costs: &[CostBreakdown]) -> Csv {
    let mut csv = Csv::new(&[
        "agent",
        "running_mean",
        "running_moment",
        "control_mean",
        "control_moment",
        "terminal_mean",
        "terminal_moment",
        "realized",
        "predicted",
        "std_error",
    ]);
    for c in costs {
        csv.row(&[
            (c.agent + 1).to_string(),
            num(c.running_mean),
            num(c.running_moment),
            num(c.control_mean),
            num(c.control_moment),
            num(c.terminal_mean),
            num(c.terminal_moment),
            num(c.total),
            num(c.predicted),
            num(c.std_error),
        ]);
    }
    csv
}

fn trajectories_csv(s: &Scenario, e: &Ensemble) -> Option<Csv> {
    let t = e.trajectories.as_ref()?;
    let mut header = vec!["path".to_string(), "k".to_string(), "x".to_string()];
    header.extend((1..=s.agents).map(|i| format!("u_{i}")));
    let mut csv = Csv::new(&header);
    for (m, states) in t.states.iter().enumerate() {
        for (k, x) in states.iter().enumerate() {
            let mut row = vec![m.to_string(), k.to_string(), num(*x)];
            row.extend((0..s.agents).map(|i| opt_num(t.controls[m][i].get(k).copied())));
            csv.row(&row);
        }
    }
    Some(csv)
}

fn series_over_k(label: String, values: &[f64]) -> Series {
    Series::new(
        label,
        values
            .iter()
            .enumerate()
            .map(|(k, v)| (k as f64, *v))
            .collect(),
    )
}

fn coefficients_chart(s: &Scenario, table: &CoefficientTable) -> Chart {
    let mut series: Vec<Series> = (0..s.agents)
        .map(|i| series_over_k(format!("alpha_bar agent {}", i + 1), &table.alpha_bar[i]))
        .collect();
    if let Some(alpha) = &table.alpha {
        series.extend(
            (0..s.agents)
                .map(|i| series_over_k(format!("alpha agent {}", i + 1), &alpha[i]).dashed()),
        );
    }
    Chart {
        title: "Cost-to-go coefficients".into(),
        x_label: "k".into(),
        y_label: "coefficient".into(),
        series,
    }
}

fn state_chart(mean: &MeanPath, ensemble: Option<&Ensemble>) -> Chart {
    let mut series = vec![series_over_k("x_bar".into(), &mean.x_bar)];
    if let Some(e) = ensemble {
        series.push(series_over_k("empirical mean".into(), &e.empirical_mean).dashed());
    }
    Chart {
        title: "Mean state".into(),
        x_label: "k".into(),
        y_label: "state".into(),
        series,
    }
}

fn controls_chart(s: &Scenario, mean: &MeanPath, ensemble: Option<&Ensemble>) -> Chart {
    let mut series: Vec<Series> = (0..s.agents)
        .map(|i| series_over_k(format!("u_bar agent {}", i + 1), &mean.u_bar[i]))
        .collect();
    if let Some(e) = ensemble {
        series.extend((0..s.agents).map(|i| {
            series_over_k(format!("empirical agent {}", i + 1), &e.control_mean[i]).dashed()
        }));
    }
    Chart {
        title: "Mean controls".into(),
        x_label: "k".into(),
        y_label: "control".into(),
        series,
    }
}

struct Simulated {
    mean: MeanPath,
    ensemble: Option<Ensemble>,
    costs: Vec<CostBreakdown>,
}

fn simulate(
    s: &Scenario,
    table: &CoefficientTable,
    gains: &GainSchedule,
    opts: &SimulateOptions,
) -> mftg_core::Result<Simulated> {
    let mean = propagate_mean(s, gains);
    if !s.family.is_stochastic() {
        let costs = evaluate_cost(s, table, gains, CostSource::MeanPath(&mean))?;
        return Ok(Simulated {
            mean,
            ensemble: None,
            costs,
        });
    }
    let paths = opts.paths.unwrap_or(s.mc.paths);
    let seed = opts.seed.unwrap_or(s.mc.seed);
    let eopts = EnsembleOptions {
        storage_cap: if opts.store_paths { paths } else { 0 },
        ..EnsembleOptions::default()
    };
    let ensemble = run_ensemble_with(s, gains, paths, seed, eopts)?;
    let costs = evaluate_cost(s, table, gains, CostSource::Ensemble(&mean, &ensemble))?;
    Ok(Simulated {
        mean,
        ensemble: Some(ensemble),
        costs,
    })
}

fn write_simulation(
    out: &mut OutputDir,
    s: &Scenario,
    table: &CoefficientTable,
    sim: &Simulated,
    plot: bool,
) -> CliResult<()> {
    put(out, "meanpath.csv", meanpath_csv(s, &sim.mean).as_bytes())?;
    if let Some(e) = &sim.ensemble {
        put(
            out,
            "ensemble_stats.csv",
            ensemble_stats_csv(s, e).as_bytes(),
        )?;
    }
    put(out, "costs.csv", costs_csv(&sim.costs).as_bytes())?;
    if let Some(t) = sim.ensemble.as_ref().and_then(|e| trajectories_csv(s, e)) {
        put(out, "trajectories.csv", t.as_bytes())?;
    }
    if plot {
        let e = sim.ensemble.as_ref();
        put(
            out,
            "state.svg",
            state_chart(&sim.mean, e).render().as_bytes(),
        )?;
        put(
            out,
            "controls.svg",
            controls_chart(s, &sim.mean, e).render().as_bytes(),
        )?;
        put(
            out,
            "coefficients.svg",
            coefficients_chart(s, table).render().as_bytes(),
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

pub fn cmd_solve(scenario: &Path, out_dir: &Path, plot: bool) -> CliResult<Outcome> {
    let loaded = read_scenario(scenario)?;
    let mut manifest = manifest("solve", scenario, &loaded.digest);
    let s = load_scenario(&loaded.text)?;
    let (table, gains) = solve(&s)?;

    let mut out = open_out(out_dir)?;
    put(
        &mut out,
        "coefficients.csv",
        coefficients_csv(&s, &table).as_bytes(),
    )?;
    put(&mut out, "gains.csv", gains_csv(&s, &gains).as_bytes())?;
    if plot {
        put(
            &mut out,
            "coefficients.svg",
            coefficients_chart(&s, &table).render().as_bytes(),
        )?;
    }
    manifest
        .extra
        .push(("family".into(), s.family.config_name().into()));
    let summary = vec![format!(
        "solved {} agents over {} steps; wrote {}",
        s.agents,
        s.horizon,
        out_dir.display()
    )];
    finish(out, manifest, Vec::new(), summary)
}

pub fn cmd_simulate(scenario: &Path, out_dir: &Path, opts: &SimulateOptions) -> CliResult<Outcome> {
    let loaded = read_scenario(scenario)?;
    let mut manifest = manifest("simulate", scenario, &loaded.digest);
    let s = load_scenario(&loaded.text)?;
    let mut warnings = Vec::new();
    if !s.family.is_stochastic() && opts.paths.is_some() {
        warnings.push("deterministic scenario: --paths ignored, writing the mean path only".into());
    }
    if !s.family.is_stochastic() && opts.store_paths {
        warnings.push("deterministic scenario: --store-paths ignored".into());
    }
    let (table, gains) = solve(&s)?;
    let sim = simulate(&s, &table, &gains, opts)?;

    let mut out = open_out(out_dir)?;
    write_simulation(&mut out, &s, &table, &sim, opts.plot)?;

    manifest
        .extra
        .push(("family".into(), s.family.config_name().into()));
    let mut summary = Vec::new();
    if let Some(e) = &sim.ensemble {
        manifest.seed = Some(e.seed);
        manifest.paths = Some(e.paths);
        summary.push(format!("simulated {} paths with seed {}", e.paths, e.seed));
    }
    for c in &sim.costs {
        let z = if c.std_error > 0.0 {
            format!(
                ", {:.2} standard errors",
                (c.total - c.predicted) / c.std_error
            )
        } else {
            String::new()
        };
        summary.push(format!(
            "agent {}: realized {:.10e}, predicted {:.10e}{z}",
            c.agent + 1,
            c.total,
            c.predicted
        ));
    }
    finish(out, manifest, warnings, summary)
}

fn inject(s: &Scenario, gains: &mut GainSchedule, inj: &GainInjection) -> CliResult<()> {
    if inj.agent > s.agents {
        return Err(CliError::Usage(format!(
            "--inject-gain agent {} out of range 1..={}",
            inj.agent, s.agents
        )));
    }
    let steps = match inj.step {
        Some(k) if k >= s.horizon => {
            return Err(CliError::Usage(format!(
                "--inject-gain step {k} out of range 0..{}",
                s.horizon
            )))
        }
        Some(k) => k..k + 1,
        None => 0..s.horizon,
    };
    let i = inj.agent - 1;
    for k in steps {
        gains.mean_gain[i][k] *= inj.factor;
        let pull: f64 = (0..s.agents)
            .map(|j| gains.mean_gain[j][k] * s.b_bar[j][k])
            .sum();
        gains.closed_loop_mean[k] = s.a_bar[k] * (1.0 - pull);
    }
    Ok(())
}

fn min_entry(t: &[Vec<f64>]) -> f64 {
    t.iter().flatten().copied().fold(f64::INFINITY, f64::min)
}

fn mode_step(mode: PerturbationMode) -> String {
    match mode {
        PerturbationMode::Uniform => String::new(),
        PerturbationMode::Step(k) => k.to_string(),
    }
}

fn report_csv(table: &CoefficientTable, r: &VerificationReport) -> Csv {
    let mut csv = Csv::new(&[
        "check",
        "agent",
        "k",
        "detail",
        "value",
        "tolerance",
        "passed",
    ]);
    let flag = |b: bool| if b { "true" } else { "false" }.to_string();
    for d in &r.deviation {
        for p in &d.probes {
            csv.row(&[
                "deviation".into(),
                (p.agent + 1).to_string(),
                mode_step(p.mode),
                format!("{} best_factor={}", p.channel.label(), num(p.best_factor)),
                num(p.margin),
                num(p.tolerance),
                flag(p.passed()),
            ]);
        }
    }
    csv.row(&[
        "stationarity".into(),
        String::new(),
        String::new(),
        "max residual".into(),
        num(r.stationarity),
        num(STATIONARITY_TOL),
        flag(r.stationarity <= STATIONARITY_TOL),
    ]);
    for p in &r.positivity {
        let t = match p.table {
            "alpha_bar" => Some(&table.alpha_bar),
            "alpha" => table.alpha.as_ref(),
            "gamma_bar" => table.gamma_bar.as_ref(),
            _ => None,
        };
        csv.row(&[
            "positivity".into(),
            String::new(),
            String::new(),
            format!("min {}", p.table),
            opt_num(t.map(|t| min_entry(t))),
            num(0.0),
            flag(p.holds),
        ]);
    }
    csv.row(&[
        "convexity".into(),
        String::new(),
        String::new(),
        "min second derivative".into(),
        num(r.convexity_min),
        num(0.0),
        flag(r.convexity_min > 0.0),
    ]);
    for (k, b) in r.bellman_residual.iter().enumerate() {
        csv.row(&[
            "bellman".into(),
            String::new(),
            k.to_string(),
            "max residual".into(),
            num(*b),
            num(BELLMAN_TOL),
            flag(*b <= BELLMAN_TOL),
        ]);
    }
    if let Some(g) = r.subgame_gap {
        csv.row(&[
            "stage_game".into(),
            String::new(),
            String::new(),
            "max gain gap".into(),
            num(g),
            num(SUBGAME_TOL),
            flag(g <= SUBGAME_TOL),
        ]);
    }
    if let Some(m) = r.jitter_margin {
        let failed = r
            .failures()
            .iter()
            .any(|f| f.starts_with("open-loop jitter"));
        csv.row(&[
            "open_loop_jitter".into(),
            String::new(),
            String::new(),
            "max improvement".into(),
            num(m),
            String::new(),
            flag(!failed),
        ]);
    }
    if let Some(lq) = &r.lq {
        csv.row(&[
            "lq_reduction".into(),
            String::new(),
            String::new(),
            "max discrepancy".into(),
            num(lq.max_discrepancy),
            String::new(),
            flag(lq.passed),
        ]);
    }
    csv
}

fn summary_text(s: &Scenario, scenario: &Path, r: &VerificationReport) -> String {
    let mut lines = Vec::new();
    let failures = r.failures();
    lines.push(format!(
        "scenario: {} ({})",
        s.name.as_deref().unwrap_or("unnamed"),
        scenario.display()
    ));
    lines.push(format!(
        "family: {}, agents: {}, horizon: {}, p: {}",
        s.family.config_name(),
        s.agents,
        s.horizon,
        s.p
    ));
    lines.push(format!(
        "result: {}",
        if failures.is_empty() { "PASS" } else { "FAIL" }
    ));
    for f in &failures {
        lines.push(format!("  failed: {f}"));
    }
    lines.push(String::new());
    lines.push("unilateral deviation".into());
    for d in &r.deviation {
        let head = format!(
            "  agent {}: {} probes, {}",
            d.agent + 1,
            d.probes.len(),
            if d.passed() {
                "no profitable deviation"
            } else {
                "PROFITABLE DEVIATION"
            }
        );
        lines.push(match d.worst() {
            Some(w) => format!(
                "{head}; closest probe {} {}: margin {:.3e} vs tolerance {:.3e} at factor {:.4}",
                w.channel.label(),
                match w.mode {
                    PerturbationMode::Uniform => "all steps".to_string(),
                    PerturbationMode::Step(k) => format!("step {k}"),
                },
                w.margin,
                w.tolerance,
                w.best_factor
            ),
            None => head,
        });
    }
    lines.push(format!(
        "stationarity: max residual {:.3e} (tolerance {STATIONARITY_TOL:e})",
        r.stationarity
    ));
    lines.push("positivity".into());
    for p in &r.positivity {
        lines.push(format!(
            "  {}: {}",
            p.table,
            if p.holds { "holds" } else { "violated" }
        ));
    }
    lines.push(format!(
        "convexity: min second derivative {:.3e}",
        r.convexity_min
    ));
    let bellman = r.bellman_residual.iter().copied().fold(0.0, f64::max);
    lines.push(format!(
        "bellman identity: max residual {bellman:.3e} over {} steps (tolerance {BELLMAN_TOL:e})",
        r.bellman_residual.len()
    ));
    if let Some(g) = r.subgame_gap {
        lines.push(format!(
            "stage-game oracle: max gain gap {g:.3e} (tolerance {SUBGAME_TOL:e})"
        ));
    }
    if let Some(m) = r.jitter_margin {
        lines.push(format!("open-loop jitter: max improvement {m:.3e}"));
    }
    if let Some(lq) = &r.lq {
        lines.push(format!(
            "LQ reduction: max discrepancy {:.3e} ({})",
            lq.max_discrepancy,
            if lq.passed { "agrees" } else { "disagrees" }
        ));
    }
    if !r.notes.is_empty() {
        lines.push("notes".into());
        lines.extend(r.notes.iter().map(|n| format!("  {n}")));
    }
    lines.push(String::new());
    lines.join("\n")
}

pub fn cmd_verify(scenario: &Path, out_dir: &Path, flags: &VerifyFlags) -> CliResult<Outcome> {
    let loaded = read_scenario(scenario)?;
    let mut manifest = manifest("verify", scenario, &loaded.digest);
    let s = load_scenario(&loaded.text)?;
    let (table, mut gains) = solve(&s)?;
    for inj in &flags.inject_gain {
        inject(&s, &mut gains, inj)?;
        manifest.extra.push((
            "inject_gain".into(),
            format!(
                "{}:{}:{}",
                inj.agent,
                inj.step
                    .map(|k| k.to_string())
                    .unwrap_or_else(|| "*".into()),
                inj.factor
            ),
        ));
    }

    let mut opts = VerifyOptions::for_scenario(&s);
    if let Some((points, span)) = flags.grid {
        opts.grid.points = points;
        opts.grid.span = span;
    }
    if let Some(p) = flags.probes {
        opts.probes = p;
    }
    if let Some(p) = flags.paths {
        if p == 0 {
            return Err(CliError::Usage("--paths must be at least 1".into()));
        }
        opts.grid.paths = p;
    }
    if let Some(seed) = flags.seed {
        opts.grid.seed = seed;
    }
    let report = verify_solution(&s, &table, &gains, &opts)?;

    let mut out = open_out(out_dir)?;
    put(
        &mut out,
        "report.csv",
        report_csv(&table, &report).as_bytes(),
    )?;
    put(
        &mut out,
        "summary.txt",
        summary_text(&s, scenario, &report).as_bytes(),
    )?;
    manifest
        .extra
        .push(("family".into(), s.family.config_name().into()));
    manifest.extra.push((
        "grid".into(),
        format!("{}:{}", opts.grid.points, opts.grid.span),
    ));
    manifest
        .extra
        .push(("probes".into(), opts.probes.to_string()));
    if s.family.is_stochastic() {
        manifest.seed = Some(opts.grid.seed);
        manifest.paths = Some(opts.grid.paths);
    }
    let failures = report.failures();
    manifest.extra.push((
        "result".into(),
        if failures.is_empty() { "pass" } else { "fail" }.into(),
    ));
    let outcome = finish(
        out,
        manifest,
        Vec::new(),
        vec![format!("verification passed; wrote {}", out_dir.display())],
    )?;
    if failures.is_empty() {
        Ok(outcome)
    } else {
        Err(CliError::Verification(failures))
    }
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

/// One `--param KEY=V1,V2,...` entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepParam {
    pub key: String,
    pub values: Vec<String>,
}

/// Splits on commas outside brackets and quotes.
fn split_values(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut quote: Option<char> = None;
    let mut cur = String::new();
    for ch in s.chars() {
        match (quote, ch) {
            (Some(q), c) if c == q => quote = None,
            (Some(_), _) => {}
            (None, '"' | '\'') => quote = Some(ch),
            (None, '[' | '{') => depth += 1,
            (None, ']' | '}') => depth -= 1,
            (None, ',') if depth == 0 => {
                out.push(std::mem::take(&mut cur).trim().to_string());
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    out.push(cur.trim().to_string());
    out.retain(|v| !v.is_empty());
    out
}

pub fn parse_param(s: &str) -> CliResult<SweepParam> {
    let (key, values) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--param `{s}` is not KEY=V1,V2,...")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("--param `{s}` has an empty key")));
    }
    let values = split_values(values);
    if values.is_empty() {
        return Err(CliError::Usage(format!(
            "--param {key} has an empty value list"
        )));
    }
    Ok(SweepParam {
        key: key.into(),
        values,
    })
}

/// TOML literal if it parses as one, bare string otherwise.
fn toml_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), String> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("key is non-empty");
    let mut t = table;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("`{p}` in `{key}` is not a table"))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn combinations(params: &[SweepParam]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = vec![Vec::new()];
    for p in params {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                p.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push(v.clone());
                    c
                })
            })
            .collect();
    }
    out
}

struct SweepRun {
    scenario: Scenario,
    table: CoefficientTable,
    gains: GainSchedule,
}

fn sweep_one(
    base: &toml::Table,
    params: &[SweepParam],
    values: &[String],
    dir: &Path,
    opts: &SimulateOptions,
    digest: &str,
    source: &Path,
) -> CliResult<SweepRun> {
    let mut table = base.clone();
    for (p, v) in params.iter().zip(values) {
        set_dotted(&mut table, &p.key, toml_value(v)).map_err(CliError::Usage)?;
    }
    let s = scenario_from_table(table)?;
    let (coeffs, gains) = solve(&s)?;
    let sim = simulate(&s, &coeffs, &gains, opts)?;

    let mut out = open_out(dir)?;
    put(
        &mut out,
        "scenario.toml",
        serialize_scenario(&s)?.as_bytes(),
    )?;
    put(
        &mut out,
        "coefficients.csv",
        coefficients_csv(&s, &coeffs).as_bytes(),
    )?;
    put(&mut out, "gains.csv", gains_csv(&s, &gains).as_bytes())?;
    write_simulation(&mut out, &s, &coeffs, &sim, false)?;
    let mut m = manifest("sweep", source, digest);
    for (p, v) in params.iter().zip(values) {
        m.extra.push((format!("param.{}", p.key), v.clone()));
    }
    if let Some(e) = &sim.ensemble {
        m.seed = Some(e.seed);
        m.paths = Some(e.paths);
    }
    finish(out, m, Vec::new(), Vec::new())?;
    Ok(SweepRun {
        scenario: s,
        table: coeffs,
        gains,
    })
}

/// Runs solve and simulate for every combination of `params`.
///
/// Writes `run-NNN/` per combination, the long-format `sweep.csv`, a
/// `runs.csv` status table and a top-level manifest. Failed combinations are
/// recorded and the sweep continues; the error carries the first failure's
/// exit code.
pub fn cmd_sweep(
    scenario: &Path,
    params: &[SweepParam],
    out_dir: &Path,
    opts: &SimulateOptions,
) -> CliResult<Outcome> {
    if params.is_empty() {
        return Err(CliError::Usage("sweep needs at least one --param".into()));
    }
    if let Some(p) = params.iter().find(|p| p.values.is_empty()) {
        return Err(CliError::Usage(format!(
            "--param {} has an empty value list",
            p.key
        )));
    }
    let loaded = read_scenario(scenario)?;
    let mut manifest = manifest("sweep", scenario, &loaded.digest);
    let base = parse_table(&loaded.text)?;
    scenario_from_table(base.clone())?;

    let mut out = open_out(out_dir)?;
    let combos = combinations(params);
    let results: Vec<CliResult<SweepRun>> = combos
        .par_iter()
        .enumerate()
        .map(|(n, values)| {
            let dir = out_dir.join(format!("run-{n:03}"));
            sweep_one(&base, params, values, &dir, opts, &loaded.digest, scenario)
        })
        .collect();

    let keys: Vec<String> = params.iter().map(|p| p.key.clone()).collect();
    let mut header = vec!["run".to_string()];
    header.extend(keys.iter().cloned());
    header.extend(
        [
            "k",
            "agent",
            "alpha_bar",
            "alpha",
            "gamma_bar",
            "mean_gain",
            "dev_gain",
        ]
        .map(String::from),
    );
    let mut long = Csv::new(&header);
    let mut status_header = vec!["run".to_string()];
    status_header.extend(keys.iter().cloned());
    status_header.extend(["status", "exit_code", "message"].map(String::from));
    let mut status = Csv::new(&status_header);

    let mut failed = Vec::new();
    for (n, (values, res)) in combos.iter().zip(&results).enumerate() {
        let mut lead = vec![n.to_string()];
        lead.extend(values.iter().cloned());
        match res {
            Ok(run) => {
                let s = &run.scenario;
                for k in 0..=s.horizon {
                    for i in 0..s.agents {
                        let mut row = lead.clone();
                        row.extend([
                            k.to_string(),
                            (i + 1).to_string(),
                            num(run.table.alpha_bar[i][k]),
                            opt_num(run.table.alpha.as_ref().map(|t| t[i][k])),
                            opt_num(run.table.gamma_bar.as_ref().map(|t| t[i][k])),
                            opt_num(run.gains.mean_gain[i].get(k).copied()),
                            opt_num(
                                run.gains
                                    .dev_gain
                                    .as_ref()
                                    .and_then(|g| g[i].get(k).copied()),
                            ),
                        ]);
                        long.row(&row);
                    }
                }
                let mut row = lead;
                row.extend(["ok".into(), "0".into(), String::new()]);
                status.row(&row);
            }
            Err(e) => {
                failed.push((n, e.exit_code(), e.to_string()));
                let mut row = lead;
                row.extend(["failed".into(), e.exit_code().to_string(), e.to_string()]);
                status.row(&row);
            }
        }
    }
    put(&mut out, "sweep.csv", long.as_bytes())?;
    put(&mut out, "runs.csv", status.as_bytes())?;
    for p in params {
        manifest
            .extra
            .push((format!("param.{}", p.key), p.values.join(",")));
    }
    manifest
        .extra
        .push(("runs".into(), combos.len().to_string()));
    manifest
        .extra
        .push(("failed".into(), failed.len().to_string()));
    if let Some(seed) = opts.seed {
        manifest.seed = Some(seed);
    }
    manifest.paths = opts.paths;

    let warnings = failed
        .iter()
        .map(|(n, _, msg)| format!("run-{n:03} failed: {msg}"))
        .collect();
    let summary = vec![format!(
        "{} of {} runs succeeded; wrote {}",
        combos.len() - failed.len(),
        combos.len(),
        out_dir.display()
    )];
    let outcome = finish(out, manifest, warnings, summary)?;
    match failed.first() {
        None => Ok(outcome),
        Some(&(_, code, _)) => Err(CliError::Sweep {
            failures: outcome.warnings,
            total: combos.len(),
            code,
        }),
    }
}
