//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mftg_cli::{
    cmd_simulate, cmd_sweep, cmd_verify, GainInjection, SimulateOptions, SweepParam, VerifyFlags,
};
use mftg_core::verify::{
    default_probes, random_convexity_draws, scalar_riccati, GridSpec, OneStepInstance,
};
use mftg_core::{
    bellman_identity_check, brute_force_one_step, evaluate_cost, load_scenario, propagate_mean,
    run_ensemble_with, solve, solve_additive, solve_deterministic, solve_general_moment_with,
    solve_multiplicative, unilateral_deviation_test, CostSource, EnsembleOptions, Family,
    InitialLaw, MomentRecursionForm, MonteCarloConfig, Scenario, Weights,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn load(name: &str) -> Result<Scenario, String> {
    let text = fs::read_to_string(scenario_path(name)).map_err(|e| e.to_string())?;
    load_scenario(&text).map_err(|e| e.to_string())
}

fn rel(x: f64, y: f64) -> f64 {
    (x - y).abs() / x.abs().max(y.abs()).max(1e-300)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(t: Duration, budget: Duration) -> Result<(), String> {
    ensure(t < budget, || format!("took {t:.2?}, budget {budget:?}"))
}

fn csv_rows(path: &Path) -> Result<Vec<Vec<String>>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| l.split(',').map(String::from).collect())
        .collect())
}

fn hand_game() -> Check {
    let start = Instant::now();
    let s = load("one_step_quartic.toml")?;
    let (table, gains) = solve(&s).map_err(|e| e.to_string())?;
    let bf = brute_force_one_step(
        &OneStepInstance::from_one_step_scenario(&s).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let mut worst_exact: f64 = 0.0;
    let mut worst_bf: f64 = 0.0;
    for i in 0..2 {
        worst_exact = worst_exact
            .max((gains.mean_gain[i][0] - 1.0 / 3.0).abs())
            .max((table.alpha_bar[i][0] - 83.0 / 81.0).abs());
        worst_bf = worst_bf
            .max((bf.mean_gain[i] - gains.mean_gain[i][0]).abs())
            .max((bf.mean_value[i] - table.alpha_bar[i][0]).abs());
    }
    let t = start.elapsed();
    ensure(worst_exact <= 1e-12, || {
        format!("closed form off by {worst_exact:e}")
    })?;
    ensure(worst_bf <= 1e-6, || {
        format!("brute force off by {worst_bf:e}")
    })?;
    within_budget(t, Duration::from_secs(1))?;
    Ok(format!(
        "g = 1/3, alpha_bar = 83/81 to {worst_exact:.1e}; brute force within {worst_bf:.1e}; {t:.2?}"
    ))
}

fn random_deterministic(rng: &mut ChaCha8Rng) -> Scenario {
    let agents = rng.random_range(1..=4);
    let n = rng.random_range(1..=12);
    let p = rng.random_range(1..=4);
    let nonzero = |rng: &mut ChaCha8Rng| {
        let m: f64 = rng.random_range(0.1..3.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    };
    let b_bar = (0..agents)
        .map(|_| (0..n).map(|_| nonzero(rng)).collect())
        .collect();
    let tab = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..agents)
            .map(|_| (0..n).map(|_| rng.random_range(0.5..5.0)).collect())
            .collect()
    };
    let q = tab(rng);
    let r = tab(rng);
    Scenario {
        name: None,
        family: Family::Deterministic2p,
        agents,
        horizon: n,
        p,
        o: None,
        a_bar: (0..n).map(|_| rng.random_range(0.5..1.5)).collect(),
        b_bar,
        deviation_dynamics: None,
        mean_weights: Weights {
            q,
            q_terminal: (0..agents).map(|_| rng.random_range(0.5..5.0)).collect(),
            r,
        },
        dev_weights: None,
        noise: None,
        x0: InitialLaw::deterministic(rng.random_range(-5.0..5.0)),
        mc: MonteCarloConfig::default(),
    }
}

fn cost_identity() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let s = random_deterministic(&mut rng);
        let (table, gains) = solve(&s).map_err(|e| e.to_string())?;
        let mean = propagate_mean(&s, &gains);
        let costs = evaluate_cost(&s, &table, &gains, CostSource::MeanPath(&mean))
            .map_err(|e| e.to_string())?;
        for (i, c) in costs.iter().enumerate() {
            let predicted = table.alpha_bar[i][0] * s.x0.mean.powi(2 * s.p as i32);
            worst = worst.max(rel(c.total, predicted));
        }
    }
    let t = start.elapsed();
    ensure(worst <= 1e-9, || format!("relative gap {worst:e}"))?;
    within_budget(t, Duration::from_secs(10))?;
    Ok(format!(
        "50 scenarios, max relative gap {worst:.1e}; {t:.2?}"
    ))
}

fn riccati() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut horizons = Vec::new();
    for trial in 0..25 {
        let mut s = random_deterministic(&mut rng);
        let n = if trial == 0 {
            50
        } else {
            rng.random_range(1..=50)
        };
        horizons.push(n);
        let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(lo..hi)).collect()
        };
        s.agents = 1;
        s.horizon = n;
        s.p = 1;
        s.a_bar = draw(&mut rng, 0.5, 1.5);
        s.b_bar = vec![draw(&mut rng, 0.1, 3.0)];
        s.mean_weights = Weights {
            q: vec![draw(&mut rng, 0.5, 5.0)],
            q_terminal: vec![rng.random_range(0.5..5.0)],
            r: vec![draw(&mut rng, 0.5, 5.0)],
        };
        let (table, _) = solve(&s).map_err(|e| e.to_string())?;
        let w = &s.mean_weights;
        let p = scalar_riccati(&s.a_bar, &s.b_bar[0], &w.q[0], &w.r[0], w.q_terminal[0]);
        for (a, b) in table.alpha_bar[0].iter().zip(&p) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    ensure(worst <= 1e-12, || format!("discrepancy {worst:e}"))?;
    Ok(format!(
        "25 instances, N up to {}, max discrepancy {worst:.1e}",
        horizons.iter().max().unwrap()
    ))
}

fn monte_carlo() -> Check {
    let start = Instant::now();
    let s = load("variance_aware_additive.toml")?;
    let (table, gains) = solve(&s).map_err(|e| e.to_string())?;
    let mean = propagate_mean(&s, &gains);
    let run = |seed: u64| -> Result<Vec<(f64, f64, f64)>, String> {
        let e = run_ensemble_with(&s, &gains, 10_000, seed, EnsembleOptions::default())
            .map_err(|e| e.to_string())?;
        let costs = evaluate_cost(&s, &table, &gains, CostSource::Ensemble(&mean, &e))
            .map_err(|e| e.to_string())?;
        Ok(costs
            .iter()
            .map(|c| (c.total, c.predicted, c.std_error))
            .collect())
    };
    let mut z_main = Vec::new();
    for (total, predicted, se) in run(42)? {
        let z = (total - predicted) / se;
        ensure(z.abs() <= 3.0, || {
            format!("seed 42: {z:.2} standard errors")
        })?;
        z_main.push(z);
    }
    let mut covered = 0;
    for seed in 1..=20 {
        if run(seed)?
            .iter()
            .all(|(t, p, se)| (t - p).abs() <= 3.0 * se)
        {
            covered += 1;
        }
    }
    let t = start.elapsed();
    ensure(covered >= 19, || format!("covered in {covered}/20 runs"))?;
    within_budget(t, Duration::from_secs(60))?;
    Ok(format!(
        "seed 42 z = [{}]; all agents covered in {covered}/20 seeds; {t:.2?}",
        z_main
            .iter()
            .map(|z| format!("{z:.2}"))
            .collect::<Vec<_>>()
            .join(", ")
    ))
}

fn p_invariance(tmp: &Path) -> Check {
    let out = tmp.join("sweep");
    let params = [SweepParam {
        key: "p".into(),
        values: vec!["2".into(), "3".into(), "4".into()],
    }];
    cmd_sweep(
        &scenario_path("variance_aware_additive.toml"),
        &params,
        &out,
        &SimulateOptions {
            paths: Some(1000),
            ..SimulateOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let rows = csv_rows(&out.join("sweep.csv"))?;
    let col = |name: &str| rows[0].iter().position(|c| c == name).unwrap();
    let (alpha, gamma, alpha_bar) = (col("alpha"), col("gamma_bar"), col("alpha_bar"));
    let block = |p: &str, j: usize| -> Vec<String> {
        rows[1..]
            .iter()
            .filter(|r| r[1] == p)
            .map(|r| r[j].clone())
            .collect()
    };
    for j in [alpha, gamma] {
        let base = block("2", j);
        ensure(
            !base.is_empty() && base.iter().all(|v| !v.is_empty()),
            || format!("column {} missing", rows[0][j]),
        )?;
        for p in ["3", "4"] {
            ensure(block(p, j) == base, || {
                format!("{} differs between p = 2 and p = {p}", rows[0][j])
            })?;
        }
    }
    ensure(block("2", alpha_bar) != block("3", alpha_bar), || {
        "alpha_bar unexpectedly identical across p".into()
    })?;
    Ok(format!(
        "alpha and gamma_bar byte-identical over {} rows per p in {{2,3,4}}; alpha_bar differs",
        block("2", alpha).len()
    ))
}

fn nash(tmp: &Path) -> Check {
    let names = [
        "higher_order_deterministic.toml",
        "variance_aware_additive.toml",
        "multiplicative_noise.toml",
    ];
    let mut probes = 0;
    let mut worst_slack = f64::NEG_INFINITY;
    for name in names {
        let s = load(name)?;
        let (_, gains) = solve(&s).map_err(|e| e.to_string())?;
        let grid = GridSpec {
            seed: s.mc.seed,
            ..GridSpec::default()
        };
        for i in 0..s.agents {
            let out = unilateral_deviation_test(&s, &gains, i, &grid).map_err(|e| e.to_string())?;
            ensure(out.passed(), || {
                format!(
                    "{name}: agent {} deviates profitably, margin {:e}",
                    i + 1,
                    out.margin()
                )
            })?;
            probes += out.probes.len();
            for p in &out.probes {
                worst_slack = worst_slack.max(p.margin - p.tolerance);
            }
        }
    }
    let mut negatives = Vec::new();
    for name in names {
        let flags = VerifyFlags {
            inject_gain: vec![GainInjection {
                agent: 1,
                step: None,
                factor: 1.2,
            }],
            ..VerifyFlags::default()
        };
        match cmd_verify(
            &scenario_path(name),
            &tmp.join(format!("inject-{name}")),
            &flags,
        ) {
            Err(e) if e.exit_code() == 6 => {
                let msg = e.to_string();
                ensure(msg.contains("unilateral deviation"), || {
                    format!("{name}: corruption caught but not by the deviation test: {msg}")
                })?;
                negatives.push(name);
            }
            Err(e) => return Err(format!("{name}: unexpected error {e}")),
            Ok(_) => return Err(format!("{name}: x1.2 corruption passed verification")),
        }
    }
    Ok(format!(
        "{probes} probes on 3 scenarios (101 points, +-20%), worst margin - tolerance {worst_slack:.1e}; x1.2 corruption rejected on {}",
        negatives.len()
    ))
}

fn zero_noise() -> Check {
    let mut checked = 0;
    for name in ["variance_aware_additive.toml", "multiplicative_noise.toml"] {
        let mut s = load(name)?;
        if let Some(noise) = s.noise.as_mut() {
            noise.sigma = vec![0.0; s.horizon];
        }
        let (det, det_gains) =
            solve_deterministic(&s.deterministic_part()).map_err(|e| e.to_string())?;
        let additive = Scenario {
            family: Family::AdditiveVariance2p,
            ..s.clone()
        };
        let multiplicative = Scenario {
            family: Family::MultiplicativeVariance2p,
            ..s.clone()
        };
        let (ta, ga) = solve_additive(&additive).map_err(|e| e.to_string())?;
        let (tm, gm) = solve_multiplicative(&multiplicative).map_err(|e| e.to_string())?;
        for (label, t, g) in [("additive", &ta, &ga), ("multiplicative", &tm, &gm)] {
            ensure(t.alpha_bar == det.alpha_bar, || {
                format!("{name}: {label} alpha_bar differs")
            })?;
            ensure(g.mean_gain == det_gains.mean_gain, || {
                format!("{name}: {label} mean gains differ")
            })?;
        }
        ensure(ta.alpha == tm.alpha, || {
            format!("{name}: additive and multiplicative alpha differ")
        })?;
        ensure(ga.dev_gain == gm.dev_gain, || {
            format!("{name}: deviation gains differ")
        })?;
        let gamma_zero = ta.gamma_bar.iter().flatten().flatten().all(|&g| g == 0.0);
        ensure(gamma_zero, || {
            format!("{name}: gamma_bar nonzero without noise")
        })?;
        checked += 1;
    }
    Ok(format!(
        "{checked} scenarios: alpha_bar and mean gains equal the deterministic tables exactly; alpha equal across families"
    ))
}

fn convexity() -> Check {
    let min = random_convexity_draws(1000, 11).map_err(|e| e.to_string())?;
    ensure(min > 0.0, || format!("smallest second derivative {min:e}"))?;
    Ok(format!(
        "1000 draws, smallest sampled second derivative {min:.3e}"
    ))
}

fn arbiter() -> Check {
    let s = load("general_moment_quartic.toml")?;
    ensure(s.o == Some(2), || "scenario is not o = 2".into())?;
    let probes = default_probes(32, 9);
    let worst = |form| -> Result<f64, String> {
        let (t, g) = solve_general_moment_with(&s, form).map_err(|e| e.to_string())?;
        let mut w: f64 = 0.0;
        for k in 0..s.horizon {
            w = w.max(bellman_identity_check(&s, &t, &g, k, &probes).map_err(|e| e.to_string())?);
        }
        Ok(w)
    };
    let forms = [
        MomentRecursionForm::WithMomentFactor,
        MomentRecursionForm::AsPrinted,
    ];
    let residuals = [worst(forms[0])?, worst(forms[1])?];
    let passing: Vec<_> = forms
        .iter()
        .zip(&residuals)
        .filter(|(_, r)| **r <= 1e-10)
        .map(|(f, _)| *f)
        .collect();
    ensure(passing.len() == 1, || {
        format!("{} forms pass: {residuals:?}", passing.len())
    })?;
    ensure(passing[0] == MomentRecursionForm::default(), || {
        "shipped default is not the passing form".into()
    })?;
    let (shipped, _) = solve(&s).map_err(|e| e.to_string())?;
    let (chosen, _) = solve_general_moment_with(&s, passing[0]).map_err(|e| e.to_string())?;
    ensure(shipped == chosen, || {
        "solve() does not use the passing form".into()
    })?;
    Ok(format!(
        "with moment factor {:.1e}, as printed {:.1e}; default pinned to the former",
        residuals[0], residuals[1]
    ))
}

fn determinism(tmp: &Path) -> Check {
    let mut compared = 0;
    for name in [
        "variance_aware_additive.toml",
        "general_moment_quartic.toml",
    ] {
        let mut outputs: Vec<(usize, Vec<Vec<u8>>)> = Vec::new();
        for threads in [1, 2, 8] {
            let dir = tmp.join(format!("det-{name}-{threads}"));
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| e.to_string())?;
            let opts = SimulateOptions {
                paths: Some(10_000),
                seed: Some(42),
                ..SimulateOptions::default()
            };
            pool.install(|| cmd_simulate(&scenario_path(name), &dir, &opts))
                .map_err(|e| e.to_string())?;
            let files = ["ensemble_stats.csv", "costs.csv", "meanpath.csv"]
                .iter()
                .map(|f| fs::read(dir.join(f)).map_err(|e| e.to_string()))
                .collect::<Result<Vec<_>, _>>()?;
            outputs.push((threads, files));
        }
        for (threads, files) in &outputs[1..] {
            ensure(*files == outputs[0].1, || {
                format!("{name}: {threads} threads differ from 1 thread")
            })?;
        }
        compared += 1;
    }
    Ok(format!(
        "{compared} scenarios, 10000 paths: ensemble_stats.csv, costs.csv, meanpath.csv byte-identical under 1, 2, 8 threads"
    ))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion> = vec![
        ("hand-derived one-step game", Box::new(hand_game)),
        ("deterministic cost-to-go identity", Box::new(cost_identity)),
        ("p = 1 Riccati reduction", Box::new(riccati)),
        ("Monte Carlo cost consistency", Box::new(monte_carlo)),
        (
            "p-invariance of alpha and gamma_bar",
            Box::new(|| p_invariance(tmp.path())),
        ),
        (
            "unilateral-deviation Nash test",
            Box::new(|| nash(tmp.path())),
        ),
        ("zero-noise reductions", Box::new(zero_noise)),
        ("convexity of the stage objective", Box::new(convexity)),
        ("Bellman identity arbiter", Box::new(arbiter)),
        (
            "thread-count determinism",
            Box::new(|| determinism(tmp.path())),
        ),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", n + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
