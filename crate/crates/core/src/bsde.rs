//! The quadratic BSDE `Y(t) = −∫_t^T Z dW − ∫_t^T h(u, Z) du` for the
//! log opportunity process, and its regression Monte Carlo solution.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::constraint::{ConstraintSet, ConstraintSpec};
use crate::error::{Error, Result};
use crate::market::{MarketModel, MarketPoint, PathSet, TimeGrid};
use crate::regression::{BasisSpec, StepRegression};
use crate::risk::{Distortion, RiskParams};

/// Constant risk bound `f ≤ K` over the measurement horizon `τ`.
#[derive(Debug, Clone)]
pub struct RiskLimit {
    pub distortion: Distortion,
    pub horizon: f64,
    pub bound: f64,
}

impl RiskLimit {
    pub fn new(distortion: Distortion, horizon: f64, bound: f64) -> Self {
        Self { distortion, horizon, bound }
    }

    pub fn spec_at(&self, rate: f64, point: MarketPoint) -> Result<ConstraintSpec> {
        let params = RiskParams::new(rate, self.horizon, self.distortion.clone())?;
        ConstraintSpec::from_point(params, self.bound, point)
    }
}

/// Risk aversion exponent, market, and (optional) risk constraint.
#[derive(Debug, Clone)]
pub struct DriverParams {
    p: f64,
    model: MarketModel,
    limit: Option<RiskLimit>,
}

impl DriverParams {
    pub fn new(p: f64, model: MarketModel, limit: Option<RiskLimit>) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::InvalidParameter(format!("risk aversion exponent p must lie in (0, 1), got {p}")));
        }
        if let Some(l) = &limit {
            // validates τ and K < 1; f(0,0) does not depend on the market
            RiskParams::new(model.rate(), l.horizon, l.distortion.clone())?;
            let min = -(model.rate() * l.horizon).exp_m1();
            if !(l.bound >= min && l.bound < 1.0) {
                return Err(Error::InvalidRiskBound { bound: l.bound, min });
            }
        }
        Ok(Self { p, model, limit })
    }

    pub fn p(&self) -> f64 {
        self.p
    }
    pub fn model(&self) -> &MarketModel {
        &self.model
    }
    pub fn limit(&self) -> Option<&RiskLimit> {
        self.limit.as_ref()
    }

    pub fn constraint_spec(&self, t: f64, state: &[f64]) -> Result<ConstraintSpec> {
        let point = self.model.point(t, state)?;
        self.spec_for_point(point)
    }

    fn spec_for_point(&self, point: MarketPoint) -> Result<ConstraintSpec> {
        match &self.limit {
            None => Ok(ConstraintSpec::unconstrained_at(point)),
            Some(l) => l.spec_at(self.model.rate(), point),
        }
    }

    /// Quadratic growth constants `(c₂, ĉ)` with `|h(z)| ≤ c₂‖z‖² + ĉ`
    /// whenever `‖θ‖ ≤ theta_bound`.
    pub fn growth_bound(&self, theta_bound: f64) -> (f64, f64) {
        let p = self.p;
        let c2 = 0.5 + 2.0 * p / (1.0 - p);
        let c_hat = p * self.model.rate() + 2.0 * p * theta_bound * theta_bound / (1.0 - p);
        (c2, c_hat)
    }

    /// Lipschitz constant in `z` of the driver truncated at `m`.
    pub fn lipschitz_bound(&self, theta_bound: f64, m: f64) -> f64 {
        m + 2.0 * self.p * (theta_bound + m) / (1.0 - self.p)
    }
}

/// `Z̃ = σ'(σσ')⁻¹(μ + σz)/(1−p)` at a frozen market point.
pub fn z_tilde_at(point: &MarketPoint, z: &DVector<f64>, p: f64) -> DVector<f64> {
    let rhs = point.mu() + point.sigma() * z;
    point.sigma().transpose() * point.solve_gram(&rhs) / (1.0 - p)
}

pub fn z_tilde(z: &DVector<f64>, model: &MarketModel, t: f64, state: &[f64], p: f64) -> Result<DVector<f64>> {
    Ok(z_tilde_at(&model.point(t, state)?, z, p))
}

fn h_with_set(point: &MarketPoint, set: Option<&ConstraintSet>, p: f64, rate: f64, z: &DVector<f64>) -> Result<f64> {
    let zt = z_tilde_at(point, z, p);
    let dist = match set {
        None => 0.0,
        Some(s) => s.project(&zt)?.distance,
    };
    Ok(-p * rate - 0.5 * z.norm_squared() - 0.5 * p * (1.0 - p) * (zt.norm_squared() - dist * dist))
}

/// `h = −pr − ½‖z‖² − p(1−p)/2·‖Z̃‖² + p(1−p)/2·dist(Z̃, Ã)²`.
pub fn driver_h(t: f64, state: &[f64], z: &DVector<f64>, params: &DriverParams) -> Result<f64> {
    let point = params.model.point(t, state)?;
    let set = match &params.limit {
        None => None,
        Some(_) => Some(params.spec_for_point(point.clone())?.compile()?),
    };
    h_with_set(&point, set.as_ref(), params.p, params.model.rate(), z)
}

/// Generator evaluated by [`solve_bsde`].
pub trait Driver: Sync {
    fn h(&self, t: f64, state: &[f64], z: &DVector<f64>) -> Result<f64>;

    /// Radial truncation level applied to `z`, if any.
    fn truncation(&self) -> Option<f64> {
        None
    }
}

impl<F> Driver for F
where
    F: Fn(f64, &[f64], &DVector<f64>) -> f64 + Sync,
{
    fn h(&self, t: f64, state: &[f64], z: &DVector<f64>) -> Result<f64> {
        Ok(self(t, state, z))
    }
}

const CACHE_CAPACITY: usize = 1 << 14;

/// The risk-constrained driver, optionally truncated, with compiled
/// constraint sets cached by the market coefficients at which they arise.
pub struct RiskDriver {
    params: DriverParams,
    truncation: Option<f64>,
    cache: RwLock<HashMap<Vec<u64>, Arc<ConstraintSet>>>,
}

impl fmt::Debug for RiskDriver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RiskDriver")
            .field("params", &self.params)
            .field("truncation", &self.truncation)
            .finish()
    }
}

impl RiskDriver {
    pub fn new(params: DriverParams) -> Self {
        Self { params, truncation: None, cache: RwLock::new(HashMap::new()) }
    }

    pub fn params(&self) -> &DriverParams {
        &self.params
    }

    /// Compiled constraint set and market point at `(t, state)`; `None` for
    /// the set when unconstrained.
    pub fn set_at(&self, t: f64, state: &[f64]) -> Result<(MarketPoint, Option<Arc<ConstraintSet>>)> {
        let point = self.params.model.point(t, state)?;
        if self.params.limit.is_none() {
            return Ok((point, None));
        }
        let key: Vec<u64> = point.mu().iter().chain(point.sigma().iter()).map(|x| x.to_bits()).collect();
        if let Some(set) = self.cache.read().expect("cache lock").get(&key) {
            return Ok((point, Some(set.clone())));
        }
        let set = Arc::new(self.params.spec_for_point(point.clone())?.compile()?);
        let mut cache = self.cache.write().expect("cache lock");
        if cache.len() < CACHE_CAPACITY {
            cache.insert(key, set.clone());
        }
        Ok((point, Some(set)))
    }

    pub fn untruncated(&self, t: f64, state: &[f64], z: &DVector<f64>) -> Result<f64> {
        let (point, set) = self.set_at(t, state)?;
        h_with_set(&point, set.as_deref(), self.params.p, self.params.model.rate(), z)
    }
}

impl Driver for RiskDriver {
    fn h(&self, t: f64, state: &[f64], z: &DVector<f64>) -> Result<f64> {
        match self.truncation {
            Some(m) if z.norm() > m => self.untruncated(t, state, &(z * (m / z.norm()))),
            _ => self.untruncated(t, state, z),
        }
    }

    fn truncation(&self) -> Option<f64> {
        self.truncation
    }
}

/// Driver with `z` clamped radially to `‖z‖ ≤ m`.
pub fn truncate_driver(params: DriverParams, m: f64) -> Result<RiskDriver> {
    if !(m > 0.0) {
        return Err(Error::InvalidParameter(format!("truncation level must be positive, got {m}")));
    }
    let mut driver = RiskDriver::new(params);
    driver.truncation = Some(m);
    Ok(driver)
}

/// Largest `‖θ‖` over every state visited by `paths`.
pub fn max_market_price_of_risk(model: &MarketModel, paths: &PathSet) -> Result<f64> {
    let grid = paths.grid();
    let per_path: Vec<f64> = (0..paths.count())
        .into_par_iter()
        .map(|j| {
            let mut best = 0.0f64;
            for i in 0..=grid.steps() {
                best = best.max(model.market_price_of_risk(grid.time(i), paths.state(j, i))?.norm());
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    Ok(per_path.into_iter().fold(0.0, f64::max))
}

/// Default truncation `10·max‖θ‖/(1−p)`, at least 1.
pub fn default_truncation(params: &DriverParams, paths: &PathSet) -> Result<f64> {
    let theta = max_market_price_of_risk(&params.model, paths)?;
    Ok((10.0 * theta / (1.0 - params.p)).max(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Picard iteration on the whole path functional.
    Forward,
    /// One backward sweep of conditional expectations.
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub basis: BasisSpec,
    pub max_iters: usize,
    pub tol: f64,
    pub scheme: Scheme,
    /// Subtract the regression estimate of the future value before
    /// multiplying by `ΔW/Δt`. Leaves the estimator unbiased and removes
    /// most of its variance.
    pub centered_z: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { basis: BasisSpec::default(), max_iters: 30, tol: 1e-4, scheme: Scheme::Forward, centered_z: true }
    }
}

/// Pathwise `Y` and `Z` plus the per-step regression coefficients that
/// define them as functions of the state.
#[derive(Debug, Clone)]
pub struct BsdeSolution {
    grid: TimeGrid,
    paths: PathSet,
    basis: BasisSpec,
    scheme: Scheme,
    // [step][path], steps 0..=N
    y: Vec<DVector<f64>>,
    // [step] of J×m, steps 0..N
    z: Vec<DMatrix<f64>>,
    y_coef: Vec<DVector<f64>>,
    z_coef: Vec<DMatrix<f64>>,
    iterations: usize,
    deltas: Vec<f64>,
    truncation: Option<f64>,
}

impl BsdeSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn paths(&self) -> &PathSet {
        &self.paths
    }
    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }
    pub fn basis_id(&self) -> String {
        self.basis.id()
    }
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }
    pub fn picard_iterations(&self) -> usize {
        self.iterations
    }
    /// `max |Y^{(k)} − Y^{(k−1)}|` for each iteration.
    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }
    pub fn truncation(&self) -> Option<f64> {
        self.truncation
    }

    /// `Y` at path `j`, step `i`.
    pub fn y(&self, path: usize, step: usize) -> f64 {
        self.y[step][path]
    }

    /// `Z` at path `j`, step `i < N`.
    pub fn z(&self, path: usize, step: usize) -> DVector<f64> {
        self.z[step].row(path).transpose()
    }

    pub fn y_step(&self, step: usize) -> &DVector<f64> {
        &self.y[step]
    }

    pub fn y0(&self) -> f64 {
        self.y[0][0]
    }

    pub fn max_abs_y(&self) -> f64 {
        self.y.iter().map(|v| v.amax()).fold(0.0, f64::max)
    }

    pub fn max_z_norm(&self) -> f64 {
        self.z
            .iter()
            .flat_map(|m| m.row_iter().map(|r| r.norm()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }

    /// Whether `max‖Z‖` reached half the truncation level.
    pub fn truncation_flagged(&self) -> bool {
        self.truncation.map_or(false, |m| self.max_z_norm() >= 0.5 * m)
    }

    /// Regression estimate of `Y(t_i)` at an arbitrary state.
    pub fn y_at(&self, step: usize, state: &[f64]) -> f64 {
        if step >= self.grid.steps() {
            return 0.0;
        }
        let phi = DVector::from_vec(self.basis.eval(self.grid.time(step), state));
        phi.dot(&self.y_coef[step])
    }

    /// Regression estimate of `Z(t_i)` at an arbitrary state.
    pub fn z_at(&self, step: usize, state: &[f64]) -> DVector<f64> {
        let phi = DVector::from_vec(self.basis.eval(self.grid.time(step), state));
        self.z_coef[step].tr_mul(&phi)
    }
}

/// `exp(Y)` indexed `[step][path]`.
pub fn opportunity_process(solution: &BsdeSolution) -> Vec<Vec<f64>> {
    solution.y.iter().map(|v| v.iter().map(|y| y.exp()).collect()).collect()
}

struct Workspace<'a> {
    paths: &'a PathSet,
    regs: Vec<StepRegression>,
    // [step] of J×m, ΔW/Δt
    scaled_increments: Vec<DMatrix<f64>>,
}

impl<'a> Workspace<'a> {
    fn new(paths: &'a PathSet, basis: &BasisSpec) -> Result<Self> {
        let grid = paths.grid();
        let (n, jn, m) = (grid.steps(), paths.count(), paths.dim());
        let regs = (0..n)
            .into_par_iter()
            .map(|i| StepRegression::new(basis, grid.time(i), (0..jn).map(|j| paths.state(j, i)), i))
            .collect::<Result<Vec<_>>>()?;
        let dt = grid.dt();
        let scaled_increments = (0..n)
            .map(|i| {
                let mut mat = DMatrix::zeros(jn, m);
                let mut buf = vec![0.0; m];
                for j in 0..jn {
                    paths.increment_into(j, i, &mut buf);
                    for k in 0..m {
                        mat[(j, k)] = buf[k] / dt;
                    }
                }
                mat
            })
            .collect();
        Ok(Self { paths, regs, scaled_increments })
    }

    // Z coefficients from the future value `future` (per path) at step i.
    fn z_regression(&self, i: usize, future: &DVector<f64>, centered: bool) -> (DMatrix<f64>, DMatrix<f64>) {
        let reg = &self.regs[i];
        let base = if centered {
            let m = reg.predict_vector(&reg.fit_vector(future));
            future - m
        } else {
            future.clone()
        };
        let mut target = self.scaled_increments[i].clone();
        for (j, mut row) in target.row_iter_mut().enumerate() {
            row *= base[j];
        }
        let coef = reg.fit(&target);
        let fitted = reg.predict(&coef);
        (coef, fitted)
    }

    fn driver_values(&self, driver: &dyn Driver, i: usize, z: &DMatrix<f64>) -> Result<DVector<f64>> {
        let t = self.paths.grid().time(i);
        let values = (0..self.paths.count())
            .into_par_iter()
            .map(|j| driver.h(t, self.paths.state(j, i), &z.row(j).transpose()))
            .collect::<Result<Vec<f64>>>()?;
        Ok(DVector::from_vec(values))
    }
}

/// Solves the BSDE on `paths` with terminal value 0.
pub fn solve_bsde(driver: &dyn Driver, paths: &PathSet, config: &SolverConfig) -> Result<BsdeSolution> {
    config.basis.validate()?;
    if config.max_iters == 0 || !(config.tol > 0.0) {
        return Err(Error::InvalidParameter("Picard iteration needs max_iters >= 1 and tol > 0".into()));
    }
    let ws = Workspace::new(paths, &config.basis)?;
    match config.scheme {
        Scheme::Forward => forward(driver, &ws, config),
        Scheme::Backward => backward(driver, &ws, config),
    }
}

fn forward(driver: &dyn Driver, ws: &Workspace, config: &SolverConfig) -> Result<BsdeSolution> {
    let grid = *ws.paths.grid();
    let (n, jn, m) = (grid.steps(), ws.paths.count(), ws.paths.dim());
    let dt = grid.dt();

    let mut z: Vec<DMatrix<f64>> = vec![DMatrix::zeros(jn, m); n];
    let mut y: Vec<DVector<f64>> = vec![DVector::zeros(jn); n + 1];
    let mut y_coef = Vec::new();
    let mut z_coef = Vec::new();
    let mut deltas = Vec::new();

    for iter in 1..=config.max_iters {
        let h = (0..n).map(|i| ws.driver_values(driver, i, &z[i])).collect::<Result<Vec<_>>>()?;
        // S_i = −Σ_{l≥i} h_l Δt
        let mut sums = vec![DVector::zeros(jn); n + 1];
        for i in (0..n).rev() {
            sums[i] = &sums[i + 1] - &h[i] * dt;
        }
        let mut new_y = vec![DVector::zeros(jn); n + 1];
        let mut new_z = Vec::with_capacity(n);
        y_coef.clear();
        z_coef.clear();
        for i in 0..n {
            let reg = &ws.regs[i];
            let coef = reg.fit_vector(&sums[i]);
            new_y[i] = reg.predict_vector(&coef);
            y_coef.push(coef);
        }
        // E[ΔW·S_{i+1} | t_i] = E[ΔW·Y_{i+1} | t_i]; the regressed Y_{i+1}
        // drops the noise of the path sum beyond t_{i+1}
        for i in 0..n {
            let (zc, zf) = ws.z_regression(i, &new_y[i + 1], config.centered_z);
            z_coef.push(zc);
            new_z.push(zf);
        }
        let delta = new_y.iter().zip(&y).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        deltas.push(delta);
        y = new_y;
        z = new_z;
        log::debug!("picard iteration {iter}: delta {delta:.3e}");
        if delta < config.tol {
            return Ok(BsdeSolution {
                grid,
                paths: ws.paths.clone(),
                basis: config.basis,
                scheme: Scheme::Forward,
                y,
                z,
                y_coef,
                z_coef,
                iterations: iter,
                deltas,
                truncation: driver.truncation(),
            });
        }
    }
    Err(Error::NoConvergence { iterations: config.max_iters, last_delta: *deltas.last().unwrap_or(&f64::NAN) })
}

fn backward(driver: &dyn Driver, ws: &Workspace, config: &SolverConfig) -> Result<BsdeSolution> {
    let grid = *ws.paths.grid();
    let (n, jn) = (grid.steps(), ws.paths.count());
    let dt = grid.dt();

    let mut y: Vec<DVector<f64>> = vec![DVector::zeros(jn); n + 1];
    let mut z: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    let mut y_coef = Vec::with_capacity(n);
    let mut z_coef = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let reg = &ws.regs[i];
        let next = &y[i + 1];
        let cond = reg.predict_vector(&reg.fit_vector(next));
        let (zc, zf) = ws.z_regression(i, next, config.centered_z);
        let h = ws.driver_values(driver, i, &zf)?;
        let yi = cond - h * dt;
        y_coef.push(reg.fit_vector(&yi));
        y[i] = yi;
        z_coef.push(zc);
        z.push(zf);
    }
    y_coef.reverse();
    z_coef.reverse();
    z.reverse();
    Ok(BsdeSolution {
        grid,
        paths: ws.paths.clone(),
        basis: config.basis,
        scheme: Scheme::Backward,
        y,
        z,
        y_coef,
        z_coef,
        iterations: 1,
        deltas: Vec::new(),
        truncation: driver.truncation(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::simulate_paths;

    fn merton_params() -> DriverParams {
        DriverParams::new(0.85, MarketModel::constant(0.0, 1.0, 1.0).unwrap(), None).unwrap()
    }

    #[test]
    fn z_tilde_examples() {
        let model = MarketModel::constant(0.0, 1.0, 1.0).unwrap();
        let zt = z_tilde(&DVector::zeros(1), &model, 0.0, &[0.0], 0.85).unwrap();
        assert!((zt[0] - 1.0 / 0.15).abs() < 1e-12);
        let flat = MarketModel::constant(0.0, 0.0, 1.0).unwrap();
        assert_eq!(z_tilde(&DVector::zeros(1), &flat, 0.0, &[0.0], 0.5).unwrap()[0], 0.0);
    }

    #[test]
    fn driver_examples() {
        let params = merton_params();
        let h = driver_h(0.0, &[0.0], &DVector::zeros(1), &params).unwrap();
        assert!((h + 0.85 / 0.3).abs() < 1e-12);
        let flat = DriverParams::new(0.5, MarketModel::constant(0.03, 0.0, 1.0).unwrap(), None).unwrap();
        assert!((driver_h(0.0, &[0.0], &DVector::zeros(1), &flat).unwrap() + 0.015).abs() < 1e-15);
    }

    #[test]
    fn feasible_tilde_leaves_driver_unchanged() {
        let model = MarketModel::constant(0.0, 1.0, 1.0).unwrap();
        let loose = RiskLimit::new(Distortion::tvar(0.1).unwrap(), 1.0 / 15.0, 0.99);
        let c = DriverParams::new(0.85, model.clone(), Some(loose)).unwrap();
        let u = DriverParams::new(0.85, model, None).unwrap();
        let z = DVector::from_element(1, -0.3);
        assert_eq!(driver_h(0.2, &[0.1], &z, &c).unwrap(), driver_h(0.2, &[0.1], &z, &u).unwrap());
    }

    #[test]
    fn truncation_clamps_radially() {
        let d = truncate_driver(merton_params(), 2.0).unwrap();
        let z = DVector::from_element(1, 4.0);
        let clamped = DVector::from_element(1, 2.0);
        assert_eq!(d.h(0.0, &[0.0], &z).unwrap(), d.untruncated(0.0, &[0.0], &clamped).unwrap());
        let small = DVector::from_element(1, 1.5);
        assert_eq!(d.h(0.0, &[0.0], &small).unwrap(), d.untruncated(0.0, &[0.0], &small).unwrap());
    }

    #[test]
    fn zero_and_constant_drivers() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let paths = simulate_paths(grid, 1, 2000, 3).unwrap();
        let zero = |_: f64, _: &[f64], _: &DVector<f64>| 0.0;
        let sol = solve_bsde(&zero, &paths, &SolverConfig::default()).unwrap();
        assert_eq!(sol.max_abs_y(), 0.0);
        assert_eq!(sol.max_z_norm(), 0.0);
        let c = 0.7;
        let constant = move |_: f64, _: &[f64], _: &DVector<f64>| c;
        for scheme in [Scheme::Forward, Scheme::Backward] {
            let cfg = SolverConfig { scheme, ..SolverConfig::default() };
            let sol = solve_bsde(&constant, &paths, &cfg).unwrap();
            for i in 0..=10 {
                let expect = -c * (1.0 - grid.time(i));
                for j in [0, 999, 1999] {
                    assert!((sol.y(j, i) - expect).abs() < 1e-10);
                }
            }
            assert!(sol.max_z_norm() < 1e-3);
        }
    }

    #[test]
    fn merton_forward_and_backward() {
        let params = merton_params();
        let grid = TimeGrid::new(1.0, 15).unwrap();
        let paths = simulate_paths(grid, 1, 4000, 8).unwrap();
        let m = default_truncation(&params, &paths).unwrap();
        let driver = truncate_driver(params, m).unwrap();
        for scheme in [Scheme::Forward, Scheme::Backward] {
            let cfg = SolverConfig { scheme, ..SolverConfig::default() };
            let sol = solve_bsde(&driver, &paths, &cfg).unwrap();
            assert!((sol.y0() - 0.85 / 0.3).abs() < 1e-9, "{scheme:?} {}", sol.y0());
            assert!(!sol.truncation_flagged());
            assert_eq!(sol.y(17, 15), 0.0);
        }
    }
}
