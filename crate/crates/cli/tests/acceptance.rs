//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crra_cli::run::RunOutput;
use crra_cli::{execute, ExperimentConfig, RunOptions};
use crra_core::bsde::{default_truncation, solve_bsde, truncate_driver, DriverParams, SolverConfig};
use crra_core::constraint::{ConstraintSet, ConstraintSpec};
use crra_core::market::{simulate_paths, MarketModel, MarketPoint, TimeGrid};
use crra_core::portfolio::{martingale_diagnostic, three_fund_decompose, FEASIBILITY_TOL};
use crra_core::risk::{mc_loss_risk_oracle, risk_functional, Distortion, RiskParams};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn measure(kind: usize, alpha: f64) -> Distortion {
    match kind % 3 {
        0 => Distortion::var(alpha).unwrap(),
        1 => Distortion::tvar(alpha).unwrap(),
        _ => Distortion::lel(alpha).unwrap(),
    }
}

fn band_config() -> ExperimentConfig {
    ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper_sec5.toml")).unwrap()
}

fn merton_oracle() -> Verdict {
    let start = Instant::now();
    let params = DriverParams::new(0.85, MarketModel::constant(0.0, 1.0, 1.0).unwrap(), None).unwrap();
    let paths = simulate_paths(TimeGrid::new(1.0, 15).unwrap(), 1, 10_000, 1).unwrap();
    let m = default_truncation(&params, &paths).unwrap();
    let driver = truncate_driver(params, m).unwrap();
    let sol = solve_bsde(&driver, &paths, &SolverConfig::default()).unwrap();
    let exact = 0.85 / 0.3;
    let rel = (sol.y0() - exact).abs() / exact;
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(rel <= 0.02 && secs <= 120.0, format!("Y(0) = {:.6}, relative error {rel:.2e}, {secs:.1} s", sol.y0()))
}

fn risk_closed_forms() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let (mut worst_se, mut worst_abs, mut failures) = (0.0f64, 0.0f64, 0);
    for kind in 0..3 {
        let params = RiskParams::new(0.0, 1.0 / 15.0, measure(kind, 0.10)).unwrap();
        for k in 0..100 {
            let x = rng.gen_range(-2.0..2.0);
            let y = rng.gen_range(0.0..3.0);
            let f = risk_functional(x, y, &params).unwrap();
            let est = mc_loss_risk_oracle(x, y, &params, 1_000_000, 10_000 * kind as u64 + k).unwrap();
            let diff = (f - est.value).abs();
            let in_se = if est.std_error > 0.0 { diff / est.std_error } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
            worst_se = worst_se.max(in_se);
            worst_abs = worst_abs.max(diff);
            if in_se > 5.0 || diff > 2e-3 {
                failures += 1;
            }
        }
    }
    Verdict::new(failures == 0, format!("300 points, worst {worst_se:.2} SE, worst |diff| {worst_abs:.2e}, {failures} failures"))
}

fn random_set(rng: &mut ChaCha8Rng) -> (ConstraintSet, usize) {
    let n = rng.gen_range(1..=2);
    let m = n + rng.gen_range(0..=1);
    let alpha = rng.gen_range(0.02..0.5);
    let params = RiskParams::new(rng.gen_range(0.0..0.05), rng.gen_range(0.02..0.5), measure(rng.gen_range(0..3), alpha))
        .unwrap();
    let lo = params.floor() + 0.05;
    let bound = rng.gen_range(lo..0.9);
    let mu = DVector::from_iterator(n, (0..n).map(|_| rng.gen_range(-1.5..1.5)));
    let mut sigma = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-0.3..0.3));
    for k in 0..n {
        sigma[(k, k)] += 1.0;
    }
    (ConstraintSpec::new(params, bound, mu, sigma).unwrap().compile().unwrap(), m)
}

fn projection_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let (mut worst, mut failures, mut coarse_failures) = (0.0f64, 0, 0);
    for _ in 0..100 {
        let (set, m) = random_set(&mut rng);
        let z = DVector::from_iterator(m, (0..m).map(|_| rng.gen_range(-4.0..4.0)));
        let h = set.covering_halfwidth().unwrap();
        let fast = set.project(&z).unwrap();
        let res = 1e-3 * h;
        let coarse = set.project_bruteforce(&z, h, res).unwrap();
        // exhaustive again on a box of two cells around the grid winner
        let fine = set.project_bruteforce_around(&z, &coarse.zeta, 2.0 * res, 1e-2 * res).unwrap();
        let slow = if fine.distance < coarse.distance { fine } else { coarse.clone() };
        let tol = 2e-3 * set.spec().point().sigma().norm();
        let gap = (fast.distance - slow.distance).abs();
        worst = worst.max(gap / tol);
        failures += usize::from(gap > tol);
        coarse_failures += usize::from((fast.distance - coarse.distance).abs() > tol);
    }
    Verdict::new(
        failures == 0,
        format!(
            "100 specs, worst gap {worst:.3} of tolerance, {failures} failures \
             ({coarse_failures} outside tolerance against the single 1e-3 grid pass)"
        ),
    )
}

fn scenario<'a>(out: &'a RunOutput, name: &str) -> &'a crra_cli::run::ScenarioRun {
    out.runs.iter().find(|r| r.name == name).unwrap()
}

fn feasibility(out: &RunOutput) -> Verdict {
    let mut worst_excess = f64::NEG_INFINITY;
    let mut all = true;
    for run in out.runs.iter().filter(|r| r.name != "unconstrained") {
        let bound = run.driver.params().limit().unwrap().bound;
        for s in run.field.iter() {
            worst_excess = worst_excess.max(s.risk - bound);
            all &= s.risk <= bound + FEASIBILITY_TOL;
        }
    }
    let violations = scenario(out, "tvar").report.baseline_violations.unwrap_or(0);
    Verdict::new(
        all && violations >= 1,
        format!("max f - K = {worst_excess:.2e}; unconstrained breaks the TVaR limit at {violations} grid points"),
    )
}

fn martingale(out: &RunOutput) -> Verdict {
    let mut detail = Vec::new();
    let mut pass = true;
    for r in &out.summary.scenarios {
        let m = r.martingale.as_ref().unwrap();
        pass &= m.z_score.abs() <= 3.0;
        detail.push(format!("{} z={:.2}", r.name, m.z_score));
    }
    let tvar = scenario(out, "tvar");
    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    let grid = *tvar.solution.grid();
    let mut worst = f64::NEG_INFINITY;
    for k in 0..20 {
        let plan: Vec<(f64, f64)> =
            (0..grid.steps()).map(|_| (rng.gen_range(0.0..1.0), if rng.gen_bool(0.8) { 1.0 } else { -1.0 })).collect();
        let driver = &tvar.driver;
        let rule = move |i: usize, t: f64, state: &[f64]| -> crra_core::Result<DVector<f64>> {
            let (frac, sign) = plan[i];
            let (_, set) = driver.set_at(t, state)?;
            let d = DVector::from_element(1, sign);
            Ok(&d * (frac * set.expect("constrained").boundary_radius(&d)?))
        };
        let rep = martingale_diagnostic(&rule, &tvar.solution, driver.params(), 1.0, 5_000, 7_000 + k).unwrap();
        let z = (rep.mean_terminal - rep.initial) / rep.std_error;
        worst = worst.max(z);
        pass &= rep.mean_terminal <= rep.initial + 3.0 * rep.std_error;
    }
    detail.push(format!("20 random feasible TVaR strategies, max z={worst:.2}"));
    Verdict::new(pass, detail.join(", "))
}

fn nesting(out: &RunOutput) -> Verdict {
    let var = scenario(out, "var");
    let tvar = scenario(out, "tvar");
    let (zv, zt) = (var.field.max_abs_position(), tvar.field.max_abs_position());
    let (yv, yt) = (var.solution.y0(), tvar.solution.y0());
    Verdict::new(
        zt <= zv + 1e-6 && yt <= yv + 0.01,
        format!("sup|zeta| TVaR {zt:.6} vs VaR {zv:.6}; Y(0) TVaR {yt:.6} vs VaR {yv:.6}"),
    )
}

fn compactness(out: &RunOutput) -> Verdict {
    let model = scenario(out, "unconstrained").driver.params().model().clone();
    let mut worst = 0.0f64;
    for state in [0.0, 2.0] {
        for kind in 0..3 {
            let params = RiskParams::new(0.0, 1.0 / 15.0, measure(kind, 0.10)).unwrap();
            for z in [1e3, -1e3] {
                let zeta = DVector::from_element(1, z);
                let stats = model.portfolio_stats(&zeta, 0.0, &[state]);
                worst = worst.max((risk_functional(stats.ret, stats.vol, &params).unwrap() - 1.0).abs());
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let mut finite = true;
    for _ in 0..100 {
        let (set, _) = random_set(&mut rng);
        let n = set.spec().point().assets();
        for k in 0..64 {
            let d = if n == 1 {
                DVector::from_element(1, if k % 2 == 0 { 1.0 } else { -1.0 })
            } else {
                let a = std::f64::consts::TAU * k as f64 / 64.0;
                DVector::from_vec(vec![a.cos(), a.sin()])
            };
            finite &= set.boundary_radius(&d).map_or(false, f64::is_finite);
        }
    }
    Verdict::new(worst <= 1e-6 && finite, format!("max |f - 1| at |zeta| = 1e3: {worst:.2e}; radii finite in 64 directions: {finite}"))
}

fn decomposition(out: &RunOutput) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8008);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..=4);
        let m = n + rng.gen_range(0..=1);
        let mu = DVector::from_iterator(n, (0..n).map(|_| rng.gen_range(-1.0..1.0)));
        let mut sigma = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-0.3..0.3));
        for k in 0..n {
            sigma[(k, k)] += 1.0;
        }
        let point = MarketPoint::new(mu, sigma, 1e12).unwrap();
        let p = rng.gen_range(0.1..0.9);
        let z = DVector::from_iterator(m, (0..m).map(|_| rng.gen_range(-1.0..1.0)));
        let (b1, b2) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let zeta = point.merton_proportion() * (b1 / (1.0 - p)) + point.preimage(&z) * b2;
        let d = three_fund_decompose(&zeta, &point, &z, p);
        worst = worst.max((d.beta1 - b1).abs()).max((d.beta2 - b2).abs());
    }
    let residual = out.runs.iter().map(|r| r.field.max_residual()).fold(0.0, f64::max);
    Verdict::new(
        worst <= 1e-10 && residual <= 1e-6,
        format!("round trip max error {worst:.2e}; optimal strategy residual {residual:.2e}"),
    )
}

fn reproducibility(first: &RunOutput, elapsed: Duration, cfg: &ExperimentConfig) -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    crra_cli::output::write_all(first, &a).unwrap();
    let second = execute(cfg, &RunOptions::default()).unwrap();
    crra_cli::output::write_all(&second, &b).unwrap();
    let mut identical = true;
    let mut files = 0;
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        if name.to_string_lossy().ends_with(".csv") {
            files += 1;
            identical &= fs::read(a.join(&name)).unwrap() == fs::read(b.join(&name)).unwrap();
        }
    }
    let secs = elapsed.as_secs_f64();
    Verdict::new(
        identical && files == 8 && secs <= 600.0,
        format!("{files} CSV files byte-identical: {identical}; full run {secs:.1} s"),
    )
}

fn main() {
    let cfg = band_config();
    let start = Instant::now();
    let run = execute(&cfg, &RunOptions::default()).unwrap();
    let elapsed = start.elapsed();

    let verdicts = [
        ("Merton oracle", merton_oracle()),
        ("risk closed forms vs Monte Carlo", risk_closed_forms()),
        ("projection vs brute force", projection_oracle()),
        ("feasibility", feasibility(&run)),
        ("martingale optimality", martingale(&run)),
        ("nesting and monotonicity", nesting(&run)),
        ("compactness", compactness(&run)),
        ("decomposition round trip", decomposition(&run)),
        ("reproducibility and runtime", reproducibility(&run, elapsed, &cfg)),
    ];
    let mut failed = 0;
    for (k, (name, v)) in verdicts.iter().enumerate() {
        println!("criterion {} {}: {} ({})", k + 1, name, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
