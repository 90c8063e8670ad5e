//! Optimal strategies from a BSDE solution, the value function, the
//! three-fund decomposition and martingale optimality checks.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::bsde::{z_tilde_at, BsdeSolution, DriverParams, RiskDriver};
use crate::error::{Error, Result};
use crate::market::{simulate_paths, MarketPoint};

const PREIMAGE_TOL: f64 = 1e-6;
/// Slack on `f ≤ K` used for the feasibility flag of a strategy.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// Coefficients of `ζ ≈ β₁·ζ_M/(1−p) + β₂·(σσ')⁻¹σZ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub beta1: f64,
    pub beta2: f64,
    pub residual: f64,
    /// The two funds are parallel (always so with one asset); `β₂` is then
    /// reported as 0 and `β₁` carries the whole position.
    pub collinear: bool,
}

/// Least-squares fit of `zeta` on the Merton fund and the hedging fund.
pub fn three_fund_decompose(zeta: &DVector<f64>, point: &MarketPoint, z: &DVector<f64>, p: f64) -> Decomposition {
    let f1 = point.merton_proportion() / (1.0 - p);
    let f2 = point.preimage(z);
    let n1 = f1.norm();
    let n2 = f2.norm();
    let single = |f: &DVector<f64>, n: f64| if n > 0.0 { zeta.dot(f) / (n * n) } else { 0.0 };

    let hedge_absent = z.norm() < 1e-12 || n2 == 0.0;
    let collinear = !hedge_absent && (n1 == 0.0 || (f1.dot(&f2).abs() >= (1.0 - 1e-10) * n1 * n2));
    let (beta1, beta2) = if hedge_absent {
        (single(&f1, n1), 0.0)
    } else if collinear {
        if n1 > 0.0 {
            (single(&f1, n1), 0.0)
        } else {
            (0.0, single(&f2, n2))
        }
    } else {
        // 2×2 normal equations
        let (a, b, c) = (n1 * n1, f1.dot(&f2), n2 * n2);
        let (r1, r2) = (zeta.dot(&f1), zeta.dot(&f2));
        let det = a * c - b * b;
        ((c * r1 - b * r2) / det, (a * r2 - b * r1) / det)
    };
    let residual = (zeta - &f1 * beta1 - &f2 * beta2).norm();
    Decomposition { beta1, beta2, residual, collinear }
}

/// Optimal position at one `(t, state)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyPoint {
    pub zeta: DVector<f64>,
    /// `f(ζ'μ, ‖ζ'σ‖)`, or `-inf` without a constraint.
    pub risk: f64,
    pub feasible: bool,
    /// `dist(Z̃, Ã)`.
    pub distance: f64,
    pub decomposition: Decomposition,
}

/// `ζ*` with `ζ*'σ = Proj(Z̃, Ã)` at `(t, state)` for the given `Z`.
pub fn strategy_point(driver: &RiskDriver, t: f64, state: &[f64], z: &DVector<f64>) -> Result<StrategyPoint> {
    let p = driver.params().p();
    let (point, set) = driver.set_at(t, state)?;
    let zt = z_tilde_at(&point, z, p);
    let (target, zeta, distance) = match &set {
        None => {
            let zeta = point.preimage(&zt);
            (zt, zeta, 0.0)
        }
        Some(s) => {
            let proj = s.project(&zt)?;
            (proj.point, proj.zeta, proj.distance)
        }
    };
    let residual = (point.exposure(&zeta) - &target).norm();
    if residual > PREIMAGE_TOL {
        return Err(Error::PreimageResidual(residual));
    }
    let (risk, feasible) = match (&set, driver.params().limit()) {
        (Some(s), Some(limit)) => {
            let r = s.risk(&zeta)?;
            (r, r <= limit.bound + FEASIBILITY_TOL)
        }
        _ => (f64::NEG_INFINITY, true),
    };
    let decomposition = three_fund_decompose(&zeta, &point, z, p);
    Ok(StrategyPoint { zeta, risk, feasible, distance, decomposition })
}

/// `ζ*`, its fund coefficients and feasibility on every regression path,
/// indexed `[step][path]` for steps `0..N`.
#[derive(Debug, Clone)]
pub struct StrategyField {
    points: Vec<Vec<StrategyPoint>>,
}

impl StrategyField {
    pub fn steps(&self) -> usize {
        self.points.len()
    }
    pub fn paths(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }
    pub fn at(&self, path: usize, step: usize) -> &StrategyPoint {
        &self.points[step][path]
    }
    pub fn zeta(&self, path: usize, step: usize) -> &DVector<f64> {
        &self.points[step][path].zeta
    }
    pub fn beta1(&self, path: usize, step: usize) -> f64 {
        self.points[step][path].decomposition.beta1
    }
    pub fn beta2(&self, path: usize, step: usize) -> f64 {
        self.points[step][path].decomposition.beta2
    }
    pub fn feasible(&self, path: usize, step: usize) -> bool {
        self.points[step][path].feasible
    }
    pub fn iter(&self) -> impl Iterator<Item = &StrategyPoint> {
        self.points.iter().flatten()
    }
    pub fn all_feasible(&self) -> bool {
        self.iter().all(|s| s.feasible)
    }
    pub fn max_abs_position(&self) -> f64 {
        self.iter().map(|s| s.zeta.amax()).fold(0.0, f64::max)
    }
    pub fn max_residual(&self) -> f64 {
        self.iter().map(|s| s.decomposition.residual).fold(0.0, f64::max)
    }
}

pub fn optimal_strategy(solution: &BsdeSolution, driver: &RiskDriver) -> Result<StrategyField> {
    let grid = solution.grid();
    let paths = solution.paths();
    let points = (0..grid.steps())
        .map(|i| {
            let t = grid.time(i);
            (0..paths.count())
                .into_par_iter()
                .map(|j| strategy_point(driver, t, paths.state(j, i), &solution.z(j, i)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StrategyField { points })
}

/// `U_p(x) = x^p / p`.
pub fn utility(x: f64, p: f64) -> f64 {
    x.powf(p) / p
}

/// `v(t_i, x) = U_p(x)·exp(Y(t_i))` on each regression path.
pub fn value_function(solution: &BsdeSolution, p: f64, step: usize, x: f64) -> Result<Vec<f64>> {
    if !(x > 0.0) {
        return Err(Error::NonpositiveWealth(x));
    }
    let u = utility(x, p);
    Ok(solution.y_step(step).iter().map(|y| u * y.exp()).collect())
}

/// A strategy as a function of time step and Brownian state.
pub trait StrategyRule: Sync {
    fn position(&self, step: usize, t: f64, state: &[f64]) -> Result<DVector<f64>>;
}

impl<F> StrategyRule for F
where
    F: Fn(usize, f64, &[f64]) -> Result<DVector<f64>> + Sync,
{
    fn position(&self, step: usize, t: f64, state: &[f64]) -> Result<DVector<f64>> {
        self(step, t, state)
    }
}

/// The optimal rule evaluated off-sample from the regression
/// representation of `Z`.
pub struct OptimalRule<'a> {
    pub solution: &'a BsdeSolution,
    pub driver: &'a RiskDriver,
}

impl StrategyRule for OptimalRule<'_> {
    fn position(&self, step: usize, t: f64, state: &[f64]) -> Result<DVector<f64>> {
        let z = self.solution.z_at(step, state);
        Ok(strategy_point(self.driver, t, state, &z)?.zeta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MartingaleReport {
    /// Sample mean of `U_p(X(T))`.
    pub mean_terminal: f64,
    /// `U_p(x)·exp(Y(0))`.
    pub initial: f64,
    pub std_error: f64,
    pub paths: usize,
}

impl MartingaleReport {
    /// `(mean − initial) / std_error`.
    pub fn z_score(&self) -> f64 {
        if self.std_error > 0.0 {
            (self.mean_terminal - self.initial) / self.std_error
        } else if self.mean_terminal == self.initial {
            0.0
        } else {
            (self.mean_terminal - self.initial).signum() * f64::INFINITY
        }
    }
}

/// Estimates `E[U_p(X^ζ(T))]` on `paths` fresh paths seeded by `seed` and
/// compares it with `U_p(x)·exp(Y(0))`.
pub fn martingale_diagnostic(
    rule: &dyn StrategyRule,
    solution: &BsdeSolution,
    params: &DriverParams,
    x0: f64,
    paths: usize,
    seed: u64,
) -> Result<MartingaleReport> {
    if !(x0 > 0.0) {
        return Err(Error::NonpositiveInitialWealth(x0));
    }
    let p = params.p();
    let grid = *solution.grid();
    let fresh = simulate_paths(grid, solution.paths().dim(), paths, seed)?;
    let terminal = (0..paths)
        .into_par_iter()
        .map(|j| {
            let strategy = (0..grid.steps())
                .map(|i| rule.position(i, grid.time(i), fresh.state(j, i)))
                .collect::<Result<Vec<_>>>()?;
            let wealth = params.model().wealth_path(&fresh, j, &strategy, x0)?;
            Ok(utility(*wealth.last().expect("nonempty wealth path"), p))
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = paths as f64;
    let mean = terminal.iter().sum::<f64>() / n;
    let var = terminal.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(MartingaleReport {
        mean_terminal: mean,
        initial: utility(x0, p) * solution.y0().exp(),
        std_error: (var / n).sqrt(),
        paths,
    })
}
