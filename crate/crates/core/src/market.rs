//! Market model: riskless bond plus `n` risky assets driven by an
//! `m`-dimensional Brownian motion, with coefficients that are functions of
//! time and the current Brownian state.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Default bound on the condition number of `σσ'`.
pub const DEFAULT_CONDITION_BOUND: f64 = 1e12;

/// Coefficient fields `μ(t, W_t)` (excess returns) and `σ(t, W_t)`.
pub trait Coefficients: Send + Sync + fmt::Debug {
    fn assets(&self) -> usize;
    fn brownian_dim(&self) -> usize;
    fn excess_return(&self, t: f64, state: &[f64]) -> DVector<f64>;
    fn volatility(&self, t: f64, state: &[f64]) -> DMatrix<f64>;
}

#[derive(Debug, Clone)]
pub struct ConstantCoefficients {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
}

impl ConstantCoefficients {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        check_shapes(&mu, &sigma)?;
        Ok(Self { mu, sigma })
    }

    /// One asset, one Brownian motion.
    pub fn scalar(mu: f64, sigma: f64) -> Self {
        Self { mu: DVector::from_element(1, mu), sigma: DMatrix::from_element(1, 1, sigma) }
    }
}

impl Coefficients for ConstantCoefficients {
    fn assets(&self) -> usize {
        self.mu.len()
    }
    fn brownian_dim(&self) -> usize {
        self.sigma.ncols()
    }
    fn excess_return(&self, _t: f64, _state: &[f64]) -> DVector<f64> {
        self.mu.clone()
    }
    fn volatility(&self, _t: f64, _state: &[f64]) -> DMatrix<f64> {
        self.sigma.clone()
    }
}

/// Drift that switches between two levels depending on whether one
/// Brownian coordinate lies in `[lower, upper]`; constant volatility.
#[derive(Debug, Clone)]
pub struct IndicatorDrift {
    pub inside: DVector<f64>,
    pub outside: DVector<f64>,
    pub lower: f64,
    pub upper: f64,
    pub coordinate: usize,
    pub sigma: DMatrix<f64>,
}

impl IndicatorDrift {
    pub fn new(
        inside: DVector<f64>,
        outside: DVector<f64>,
        lower: f64,
        upper: f64,
        coordinate: usize,
        sigma: DMatrix<f64>,
    ) -> Result<Self> {
        check_shapes(&inside, &sigma)?;
        check_shapes(&outside, &sigma)?;
        if coordinate >= sigma.ncols() {
            return Err(Error::InvalidParameter(format!(
                "indicator coordinate {coordinate} out of range for {} Brownian motions",
                sigma.ncols()
            )));
        }
        if !(lower <= upper) {
            return Err(Error::InvalidParameter("indicator interval must satisfy lower <= upper".into()));
        }
        Ok(Self { inside, outside, lower, upper, coordinate, sigma })
    }

    /// `dS = S (1_{[-1,1]}(W) dt + dW)`.
    pub fn unit_band() -> Self {
        Self {
            inside: DVector::from_element(1, 1.0),
            outside: DVector::from_element(1, 0.0),
            lower: -1.0,
            upper: 1.0,
            coordinate: 0,
            sigma: DMatrix::from_element(1, 1, 1.0),
        }
    }
}

impl Coefficients for IndicatorDrift {
    fn assets(&self) -> usize {
        self.inside.len()
    }
    fn brownian_dim(&self) -> usize {
        self.sigma.ncols()
    }
    fn excess_return(&self, _t: f64, state: &[f64]) -> DVector<f64> {
        let w = state[self.coordinate];
        if w >= self.lower && w <= self.upper {
            self.inside.clone()
        } else {
            self.outside.clone()
        }
    }
    fn volatility(&self, _t: f64, _state: &[f64]) -> DMatrix<f64> {
        self.sigma.clone()
    }
}

fn check_shapes(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<()> {
    if mu.is_empty() || sigma.nrows() != mu.len() {
        return Err(Error::InvalidParameter(format!(
            "drift has {} entries but volatility has {} rows",
            mu.len(),
            sigma.nrows()
        )));
    }
    if sigma.ncols() < sigma.nrows() {
        return Err(Error::InvalidParameter(format!(
            "need at least as many Brownian motions ({}) as assets ({})",
            sigma.ncols(),
            sigma.nrows()
        )));
    }
    Ok(())
}

/// Portfolio rate of return `ζ'μ` and volatility `‖ζ'σ‖`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PortfolioStats {
    pub ret: f64,
    pub vol: f64,
}

/// Market coefficients frozen at one `(t, state)` together with the
/// factorization of `σσ'` and the derived Merton quantities.
#[derive(Debug, Clone)]
pub struct MarketPoint {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
    gram: Cholesky<f64, Dyn>,
    merton: DVector<f64>,
    theta: DVector<f64>,
}

impl MarketPoint {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, condition_bound: f64) -> Result<Self> {
        check_shapes(&mu, &sigma)?;
        if mu.iter().chain(sigma.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("market coefficients must be finite".into()));
        }
        let gram_matrix = &sigma * sigma.transpose();
        let eig = gram_matrix.clone().symmetric_eigen();
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if !(condition <= condition_bound) {
            return Err(Error::SingularCovariance { condition, bound: condition_bound });
        }
        let gram = Cholesky::new(gram_matrix.clone())
            .ok_or(Error::SingularCovariance { condition, bound: condition_bound })?;
        let mut merton = gram.solve(&mu);
        // one step of iterative refinement
        let residual = &mu - &gram_matrix * &merton;
        merton += gram.solve(&residual);
        let theta = sigma.transpose() * &merton;
        Ok(Self { mu, sigma, gram, merton, theta })
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }
    pub fn assets(&self) -> usize {
        self.mu.len()
    }
    pub fn brownian_dim(&self) -> usize {
        self.sigma.ncols()
    }

    /// `ζ_M` solving `σσ'ζ_M = μ`.
    pub fn merton_proportion(&self) -> &DVector<f64> {
        &self.merton
    }

    /// `θ = σ'(σσ')⁻¹μ`.
    pub fn market_price_of_risk(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn solve_gram(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.gram.solve(rhs)
    }

    /// Minimum-norm `ζ` with `σ'ζ = w` for `w` in the row space of `σ`:
    /// `ζ = (σσ')⁻¹σw`.
    pub fn preimage(&self, w: &DVector<f64>) -> DVector<f64> {
        self.gram.solve(&(&self.sigma * w))
    }

    /// Orthogonal projection `σ'(σσ')⁻¹σz` onto the row space of `σ`.
    pub fn project_row_space(&self, z: &DVector<f64>) -> DVector<f64> {
        self.sigma.transpose() * self.preimage(z)
    }

    /// `ζ'σ` as an m-vector.
    pub fn exposure(&self, zeta: &DVector<f64>) -> DVector<f64> {
        self.sigma.transpose() * zeta
    }

    pub fn stats(&self, zeta: &DVector<f64>) -> PortfolioStats {
        PortfolioStats { ret: zeta.dot(&self.mu), vol: self.exposure(zeta).norm() }
    }
}

/// Financial market with riskless rate `r ≥ 0` and coefficient fields.
#[derive(Clone)]
pub struct MarketModel {
    rate: f64,
    coefficients: Arc<dyn Coefficients>,
    condition_bound: f64,
    mpr_bound: Option<f64>,
}

impl fmt::Debug for MarketModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarketModel")
            .field("rate", &self.rate)
            .field("coefficients", &self.coefficients)
            .field("condition_bound", &self.condition_bound)
            .field("mpr_bound", &self.mpr_bound)
            .finish()
    }
}

impl MarketModel {
    pub fn new(rate: f64, coefficients: Arc<dyn Coefficients>) -> Result<Self> {
        if !(rate >= 0.0) || !rate.is_finite() {
            return Err(Error::InvalidParameter(format!("riskless rate must be finite and >= 0, got {rate}")));
        }
        if rate == 0.0 {
            log::warn!("riskless rate is zero; the model nominally assumes r > 0");
        }
        let n = coefficients.assets();
        let m = coefficients.brownian_dim();
        if n == 0 || m < n {
            return Err(Error::InvalidParameter(format!("need 1 <= n <= m, got n={n}, m={m}")));
        }
        Ok(Self { rate, coefficients, condition_bound: DEFAULT_CONDITION_BOUND, mpr_bound: None })
    }

    pub fn constant(rate: f64, mu: f64, sigma: f64) -> Result<Self> {
        Self::new(rate, Arc::new(ConstantCoefficients::scalar(mu, sigma)))
    }

    pub fn with_condition_bound(mut self, bound: f64) -> Self {
        self.condition_bound = bound;
        self
    }

    /// Enforce `‖θ‖ ≤ bound` at every evaluated point.
    pub fn with_mpr_bound(mut self, bound: f64) -> Self {
        self.mpr_bound = Some(bound);
        self
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
    pub fn assets(&self) -> usize {
        self.coefficients.assets()
    }
    pub fn brownian_dim(&self) -> usize {
        self.coefficients.brownian_dim()
    }
    pub fn coefficients(&self) -> &Arc<dyn Coefficients> {
        &self.coefficients
    }

    pub fn point(&self, t: f64, state: &[f64]) -> Result<MarketPoint> {
        let mu = self.coefficients.excess_return(t, state);
        let sigma = self.coefficients.volatility(t, state);
        let point = MarketPoint::new(mu, sigma, self.condition_bound)?;
        if let Some(bound) = self.mpr_bound {
            let norm = point.theta.norm();
            if norm > bound {
                return Err(Error::MarketPriceOfRiskBound { norm, bound });
            }
        }
        Ok(point)
    }

    pub fn merton_proportion(&self, t: f64, state: &[f64]) -> Result<DVector<f64>> {
        Ok(self.point(t, state)?.merton)
    }

    pub fn market_price_of_risk(&self, t: f64, state: &[f64]) -> Result<DVector<f64>> {
        Ok(self.point(t, state)?.theta)
    }

    pub fn portfolio_stats(&self, zeta: &DVector<f64>, t: f64, state: &[f64]) -> PortfolioStats {
        let mu = self.coefficients.excess_return(t, state);
        let sigma = self.coefficients.volatility(t, state);
        PortfolioStats { ret: zeta.dot(&mu), vol: (sigma.transpose() * zeta).norm() }
    }

    /// Wealth along one path for a strategy held constant on each
    /// `[t_i, t_{i+1})`, using the exact exponential solution with the
    /// coefficients frozen at the left endpoint.
    pub fn wealth_path(&self, paths: &PathSet, path: usize, strategy: &[DVector<f64>], x0: f64) -> Result<Vec<f64>> {
        if !(x0 > 0.0) {
            return Err(Error::NonpositiveInitialWealth(x0));
        }
        let grid = paths.grid();
        if strategy.len() != grid.steps() {
            return Err(Error::InvalidParameter(format!(
                "strategy has {} steps, grid has {}",
                strategy.len(),
                grid.steps()
            )));
        }
        let mut log_wealth = x0.ln();
        let mut out = Vec::with_capacity(grid.steps() + 1);
        out.push(x0);
        let mut dw = vec![0.0; paths.dim()];
        for (i, zeta) in strategy.iter().enumerate() {
            if zeta.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("non-finite strategy at step {i}")));
            }
            let t = grid.time(i);
            let state = paths.state(path, i);
            let mu = self.coefficients.excess_return(t, state);
            let sigma = self.coefficients.volatility(t, state);
            let exposure = sigma.transpose() * zeta;
            paths.increment_into(path, i, &mut dw);
            let noise: f64 = exposure.iter().zip(&dw).map(|(a, b)| a * b).sum();
            let dt = grid.dt();
            log_wealth += (self.rate + zeta.dot(&mu) - 0.5 * exposure.norm_squared()) * dt + noise;
            out.push(log_wealth.exp());
        }
        Ok(out)
    }
}

/// Uniform grid `t_i = iT/N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::InvalidParameter("grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }
    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            self.horizon * i as f64 / self.steps as f64
        }
    }
    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }
}

/// Simulated Brownian states `W[j][i]` on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    seed: u64,
    grid: TimeGrid,
    dim: usize,
    count: usize,
    // row-major [path][step][coordinate]
    states: Vec<f64>,
}

impl PathSet {
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let start = (path * (self.grid.steps + 1) + step) * self.dim;
        &self.states[start..start + self.dim]
    }

    /// `W[path][step+1] − W[path][step]` written into `out`.
    pub fn increment_into(&self, path: usize, step: usize, out: &mut [f64]) {
        let a = self.state(path, step);
        let b = self.state(path, step + 1);
        for k in 0..self.dim {
            out[k] = b[k] - a[k];
        }
    }

    pub fn increment(&self, path: usize, step: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.increment_into(path, step, &mut out);
        out
    }
}

/// Simulates `count` Brownian paths of dimension `dim`. Path `j` uses its
/// own ChaCha stream derived from `(seed, j)`, so the output does not depend
/// on evaluation order.
pub fn simulate_paths(grid: TimeGrid, dim: usize, count: usize, seed: u64) -> Result<PathSet> {
    use rayon::prelude::*;

    if count == 0 || dim == 0 {
        return Err(Error::InvalidParameter("need at least one path and one Brownian dimension".into()));
    }
    let row = (grid.steps + 1) * dim;
    let mut states = vec![0.0; count * row];
    let sd = grid.dt().sqrt();
    states.par_chunks_mut(row).enumerate().for_each(|(j, chunk)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        for i in 0..grid.steps {
            for k in 0..dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                chunk[(i + 1) * dim + k] = chunk[i * dim + k] + sd * z;
            }
        }
    });
    Ok(PathSet { seed, grid, dim, count, states })
}
