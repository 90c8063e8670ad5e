//! Solving every scenario of a configuration and collecting the report.

use serde::Serialize;

use crra_core::bsde::{
    default_truncation, solve_bsde, truncate_driver, BsdeSolution, DriverParams, RiskDriver, RiskLimit, Scheme,
    SolverConfig,
};
use crra_core::market::{simulate_paths, PathSet};
use crra_core::portfolio::{martingale_diagnostic, optimal_strategy, utility, OptimalRule, StrategyField, FEASIBILITY_TOL};
use crra_core::risk::{mc_loss_risk_oracle, risk_functional, RiskParams};

use crate::config::{ExperimentConfig, BASELINE};
use crate::CliError;

// Offsets that separate the auxiliary random streams from the path seed.
const MARTINGALE_STREAM: u64 = 0x6d61_7274;
const ORACLE_STREAM: u64 = 0x6f72_6163;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `grid.seed`.
    pub seed: Option<u64>,
    /// Run only this scenario (the baseline is named `unconstrained`).
    pub scenario: Option<String>,
    pub oracle_checks: bool,
}

pub struct ScenarioRun {
    pub name: String,
    pub solution: BsdeSolution,
    pub driver: RiskDriver,
    pub field: StrategyField,
    pub report: ScenarioReport,
}

pub struct RunOutput {
    pub runs: Vec<ScenarioRun>,
    pub summary: Summary,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub martingale_seed: u64,
    pub oracle_seed: u64,
    pub times: Vec<f64>,
    pub scenarios: Vec<ScenarioReport>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub measure: Option<String>,
    pub bound: Option<f64>,
    pub tau: Option<f64>,
    pub y0: f64,
    pub exp_y0: f64,
    /// `U(x)·exp(Y(0))` at the configured initial wealth.
    pub value0: f64,
    pub scheme: String,
    pub basis: String,
    pub picard_iterations: usize,
    pub picard_deltas: Vec<f64>,
    pub truncation: Option<f64>,
    pub truncation_flagged: bool,
    pub max_abs_y: f64,
    pub max_z_norm: f64,
    pub all_feasible: bool,
    pub infeasible_points: usize,
    pub max_abs_position: f64,
    pub max_decomposition_residual: f64,
    pub opportunity_band: Vec<Band>,
    pub backward_y0: Option<f64>,
    pub martingale: Option<MartingaleSummary>,
    /// Grid points where the baseline strategy breaks this constraint.
    pub baseline_violations: Option<usize>,
    pub oracle: Option<OracleSummary>,
}

/// Path mean and 5%/95% quantiles of `exp(Y)` at one time.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Band {
    pub t: f64,
    pub mean: f64,
    pub q05: f64,
    pub q95: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MartingaleSummary {
    pub paths: usize,
    pub mean_terminal: f64,
    pub initial: f64,
    pub std_error: f64,
    pub z_score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleSummary {
    pub risk: Vec<RiskCheck>,
    pub projection: Vec<ProjectionCheck>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RiskCheck {
    pub step: usize,
    pub path: usize,
    pub closed_form: f64,
    pub monte_carlo: f64,
    pub std_error: f64,
    pub within_5_se: bool,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ProjectionCheck {
    pub step: usize,
    pub path: usize,
    pub distance: f64,
    pub bruteforce_distance: f64,
    pub resolution: f64,
    pub tolerance: f64,
    pub pass: bool,
}

struct Plan {
    name: String,
    limit: Option<RiskLimit>,
}

/// Solves all selected scenarios on one shared path set.
pub fn execute(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput, CliError> {
    cfg.validate()?;
    let seed = opts.seed.unwrap_or(cfg.grid.seed);
    let model = cfg.market.build()?;
    let grid = cfg.time_grid()?;

    let mut plans = vec![Plan { name: BASELINE.into(), limit: None }];
    for s in &cfg.scenarios {
        plans.push(Plan { name: s.name.clone(), limit: Some(s.limit()?) });
    }
    if let Some(only) = &opts.scenario {
        plans.retain(|p| &p.name == only);
        if plans.is_empty() {
            return Err(CliError::Config(format!("no scenario named {only:?}")));
        }
    }

    let paths = simulate_paths(grid, model.brownian_dim(), cfg.grid.paths, seed)?;
    let solver = cfg.solver.solver_config();
    let martingale_seed = seed.wrapping_add(MARTINGALE_STREAM);
    let oracle_seed = seed.wrapping_add(ORACLE_STREAM);

    let mut runs = Vec::with_capacity(plans.len());
    for plan in plans {
        log::info!("solving scenario {}", plan.name);
        let params = DriverParams::new(cfg.utility.p, model.clone(), plan.limit.clone())?;
        let m = match cfg.solver.truncation {
            Some(m) => m,
            None => default_truncation(&params, &paths)?,
        };
        let driver = truncate_driver(params, m)?;
        let solution = solve_bsde(&driver, &paths, &solver)?;
        let field = optimal_strategy(&solution, &driver)?;
        let backward_y0 = if cfg.diagnostics.cross_check && solver.scheme == Scheme::Forward {
            let cfg_b = SolverConfig { scheme: Scheme::Backward, ..solver };
            Some(solve_bsde(&driver, &paths, &cfg_b)?.y0())
        } else {
            None
        };
        let martingale = if cfg.diagnostics.martingale_paths > 0 {
            let rule = OptimalRule { solution: &solution, driver: &driver };
            let rep = martingale_diagnostic(
                &rule,
                &solution,
                driver.params(),
                cfg.utility.wealth,
                cfg.diagnostics.martingale_paths,
                martingale_seed,
            )?;
            Some(MartingaleSummary {
                paths: rep.paths,
                mean_terminal: rep.mean_terminal,
                initial: rep.initial,
                std_error: rep.std_error,
                z_score: rep.z_score(),
            })
        } else {
            None
        };
        let oracle = if opts.oracle_checks && plan.limit.is_some() {
            Some(oracle_checks(cfg, &solution, &driver, &field, &paths, oracle_seed)?)
        } else {
            None
        };
        let report = scenario_report(cfg, &plan, &solution, &field, backward_y0, martingale, oracle);
        runs.push(ScenarioRun { name: plan.name, solution, driver, field, report });
    }

    if let Some(base) = runs.iter().position(|r| r.name == BASELINE) {
        for k in 0..runs.len() {
            if k != base {
                let count = violations(&runs[base].field, &runs[k].driver, &paths)?;
                runs[k].report.baseline_violations = Some(count);
            }
        }
    }

    let scenarios: Vec<ScenarioReport> = runs.iter().map(|r| r.report.clone()).collect();
    let summary = Summary {
        config: resolved(cfg, seed),
        seed,
        martingale_seed,
        oracle_seed,
        times: grid.times(),
        flags: flags(&scenarios),
        scenarios,
    };
    Ok(RunOutput { runs, summary })
}

fn resolved(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut cfg = cfg.clone();
    cfg.grid.seed = seed;
    cfg
}

fn scenario_report(
    cfg: &ExperimentConfig,
    plan: &Plan,
    solution: &BsdeSolution,
    field: &StrategyField,
    backward_y0: Option<f64>,
    martingale: Option<MartingaleSummary>,
    oracle: Option<OracleSummary>,
) -> ScenarioReport {
    let y0 = solution.y0();
    let grid = solution.grid();
    let opportunity_band = (0..=grid.steps())
        .map(|i| {
            let mut v: Vec<f64> = solution.y_step(i).iter().map(|y| y.exp()).collect();
            v.sort_by(f64::total_cmp);
            let q = |a: f64| v[(a * (v.len() - 1) as f64).round() as usize];
            Band { t: grid.time(i), mean: v.iter().sum::<f64>() / v.len() as f64, q05: q(0.05), q95: q(0.95) }
        })
        .collect();
    ScenarioReport {
        name: plan.name.clone(),
        measure: plan.limit.as_ref().map(|l| l.distortion.label()),
        bound: plan.limit.as_ref().map(|l| l.bound),
        tau: plan.limit.as_ref().map(|l| l.horizon),
        y0,
        exp_y0: y0.exp(),
        value0: utility(cfg.utility.wealth, cfg.utility.p) * y0.exp(),
        scheme: format!("{:?}", solution.scheme()).to_lowercase(),
        basis: solution.basis_id(),
        picard_iterations: solution.picard_iterations(),
        picard_deltas: solution.deltas().to_vec(),
        truncation: solution.truncation(),
        truncation_flagged: solution.truncation_flagged(),
        max_abs_y: solution.max_abs_y(),
        max_z_norm: solution.max_z_norm(),
        all_feasible: field.all_feasible(),
        infeasible_points: field.iter().filter(|s| !s.feasible).count(),
        max_abs_position: field.max_abs_position(),
        max_decomposition_residual: field.max_residual(),
        opportunity_band,
        backward_y0,
        martingale,
        baseline_violations: None,
        oracle,
    }
}

fn violations(baseline: &StrategyField, driver: &RiskDriver, paths: &PathSet) -> Result<usize, CliError> {
    let grid = paths.grid();
    let mut count = 0;
    for i in 0..grid.steps() {
        for j in 0..paths.count() {
            let (_, set) = driver.set_at(grid.time(i), paths.state(j, i))?;
            if let Some(set) = set {
                let bound = set.spec().bound().unwrap_or(f64::INFINITY);
                if set.risk(baseline.zeta(j, i))? > bound + FEASIBILITY_TOL {
                    count += 1;
                }
            }
        }
    }
    Ok(count)
}

fn oracle_checks(
    cfg: &ExperimentConfig,
    solution: &BsdeSolution,
    driver: &RiskDriver,
    field: &StrategyField,
    paths: &PathSet,
    seed: u64,
) -> Result<OracleSummary, CliError> {
    let grid = paths.grid();
    let limit = driver.params().limit().expect("constrained scenario");
    let params = RiskParams::new(cfg.market.rate(), limit.horizon, limit.distortion.clone())?;
    let n = driver.params().model().assets();
    let mut risk = Vec::new();
    let mut projection = Vec::new();
    for k in 0..cfg.diagnostics.oracle_points {
        let i = k % grid.steps();
        let j = (k * 7919) % paths.count();
        let (t, state) = (grid.time(i), paths.state(j, i));
        let (point, set) = driver.set_at(t, state)?;
        let set = set.expect("constrained scenario");
        let stats = point.stats(field.zeta(j, i));
        let closed_form = risk_functional(stats.ret, stats.vol, &params)?;
        let est = mc_loss_risk_oracle(stats.ret, stats.vol, &params, cfg.diagnostics.oracle_samples, seed + k as u64)?;
        risk.push(RiskCheck {
            step: i,
            path: j,
            closed_form,
            monte_carlo: est.value,
            std_error: est.std_error,
            within_5_se: (closed_form - est.value).abs() <= 5.0 * est.std_error + 1e-12,
        });
        if n <= 2 {
            let target = crra_core::bsde::z_tilde_at(&point, &solution.z(j, i), driver.params().p());
            let fast = set.project(&target)?;
            let h = set.covering_halfwidth()?;
            let resolution = if n == 1 { 1e-3 * h } else { 2e-3 * h };
            let slow = set.project_bruteforce(&target, h, resolution)?;
            let tolerance = 2e-3 * point.sigma().norm();
            projection.push(ProjectionCheck {
                step: i,
                path: j,
                distance: fast.distance,
                bruteforce_distance: slow.distance,
                resolution,
                tolerance,
                pass: (fast.distance - slow.distance).abs() <= tolerance,
            });
        }
    }
    Ok(OracleSummary { risk, projection })
}

fn flags(reports: &[ScenarioReport]) -> Vec<String> {
    let mut flags = Vec::new();
    for r in reports {
        if r.truncation_flagged {
            flags.push(format!("{}: max |Z| reached half the truncation level", r.name));
        }
        if !r.all_feasible {
            flags.push(format!("{}: {} infeasible strategy points", r.name, r.infeasible_points));
        }
        if r.baseline_violations == Some(0) {
            flags.push(format!("{}: baseline strategy never violates the constraint (vacuous)", r.name));
        }
        if let Some(m) = &r.martingale {
            if m.z_score.abs() > 3.0 {
                flags.push(format!("{}: martingale check off by {:.2} standard errors", r.name, m.z_score));
            }
        }
        if let Some(o) = &r.oracle {
            let bad = o.risk.iter().filter(|c| !c.within_5_se).count() + o.projection.iter().filter(|c| !c.pass).count();
            if bad > 0 {
                flags.push(format!("{}: {bad} oracle comparisons outside tolerance", r.name));
            }
        }
    }
    flags
}

