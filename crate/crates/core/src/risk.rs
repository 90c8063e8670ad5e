//! Distortion risk measures applied to the projected relative wealth loss.
//!
//! Over a horizon `τ` with strategy and coefficients frozen, the relative
//! loss is `L = 1 − exp(Y)` with `Y ~ N((r + x − y²/2)τ, y²τ)`, where `x` is
//! the portfolio rate of return and `y` the portfolio volatility. The risk
//! of `L` under a distortion `D` is `∫ F_L⁻¹(u) dD(u)`.
//!
//! Because `L` is decreasing in `Y`, `F_L⁻¹(u) = 1 − exp(m + s·N⁻¹(1 − u))`
//! with `m = (r + x − y²/2)τ` and `s = y√τ`. That orientation is the one
//! the Monte Carlo oracle in this module reproduces; writing `N⁻¹(u)`
//! instead would measure the best rather than the worst outcomes.

use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::market::{MarketModel, PortfolioStats};
use crate::normal;
use crate::quadrature;

/// Confidence level `α ∈ (0, 1)` with its cached normal quantile `N⁻¹(α)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Level {
    alpha: f64,
    quantile: f64,
}

impl Level {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(Self { alpha, quantile: normal::quantile(alpha) })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// Piecewise-linear distortion given by knots `(u, D(u))`. Two knots with
/// the same `u` encode a jump; the function is right-continuous.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinear {
    knots: Vec<(f64, f64)>,
}

impl PiecewiseLinear {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        let bad = |msg: String| Err(Error::DegenerateDistortion(msg));
        if knots.len() < 2 {
            return bad("need at least two knots".into());
        }
        if knots.iter().any(|(u, d)| !u.is_finite() || !d.is_finite()) {
            return bad("knots must be finite".into());
        }
        let (u0, d0) = knots[0];
        let (u1, d1) = knots[knots.len() - 1];
        if u0 != 0.0 || u1 != 1.0 {
            return bad(format!("knots must span [0, 1], got [{u0}, {u1}]"));
        }
        if d1 != 1.0 {
            return bad(format!("D(1) must be 1, got {d1}"));
        }
        for w in knots.windows(2) {
            if w[1].0 < w[0].0 || w[1].1 < w[0].1 {
                return bad(format!("knots must be nondecreasing: {:?} then {:?}", w[0], w[1]));
            }
        }
        for w in knots.windows(3) {
            if w[0].0 == w[1].0 && w[1].0 == w[2].0 {
                return bad(format!("at most two knots may share u = {}", w[0].0));
            }
        }
        let pl = Self { knots };
        if d0 != 0.0 || pl.value(0.0) != 0.0 {
            return bad("D(0) must be 0".into());
        }
        Ok(pl)
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn value(&self, u: f64) -> f64 {
        if u >= 1.0 {
            return 1.0;
        }
        if u < 0.0 {
            return 0.0;
        }
        // last knot with knot.u <= u; skips past the left side of a jump
        let k = self.knots.partition_point(|kn| kn.0 <= u) - 1;
        let (ua, da) = self.knots[k];
        let (ub, db) = self.knots[k + 1];
        if ub > ua {
            da + (db - da) * (u - ua) / (ub - ua)
        } else {
            da
        }
    }
}

// A cell is suspect when its increment dwarfs both neighbours. Each suspect
// is narrowed by bisection toward the half carrying more of the increment.
fn locate_jumps<F: Fn(f64) -> f64>(func: &F, grid: &[f64]) -> Vec<f64> {
    let h = 1.0 / (grid.len() - 1) as f64;
    let inc: Vec<f64> = grid.windows(2).map(|w| w[1] - w[0]).collect();
    let mut jumps = Vec::new();
    for k in 0..inc.len() {
        let left = if k > 0 { inc[k - 1] } else { 0.0 };
        let right = inc.get(k + 1).copied().unwrap_or(0.0);
        if inc[k] <= 1e-8 || inc[k] <= 3.0 * left.max(right) {
            continue;
        }
        let (mut lo, mut hi) = (k as f64 * h, (k + 1) as f64 * h);
        let (mut dlo, mut dhi) = (grid[k], grid[k + 1]);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let dm = func(mid);
            if dm - dlo >= dhi - dm {
                hi = mid;
                dhi = dm;
            } else {
                lo = mid;
                dlo = dm;
            }
        }
        jumps.push(hi);
    }
    jumps
}

/// Arbitrary distortion supplied as a function on `[0, 1]`.
#[derive(Clone)]
pub struct GenericDistortion {
    name: String,
    func: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    // approximate jump locations found on the validation grid
    jumps: Vec<f64>,
}

impl fmt::Debug for GenericDistortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GenericDistortion").field("name", &self.name).finish()
    }
}

impl GenericDistortion {
    pub fn value(&self, u: f64) -> f64 {
        (self.func)(u.clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone)]
pub enum Distortion {
    /// `D(u) = 1{u ≥ 1 − α}`.
    Var(Level),
    /// `D(u) = (u − (1 − α))⁺ / α`.
    Tvar(Level),
    /// TVaR of the loss computed with the portfolio drift removed.
    Lel(Level),
    PiecewiseLinear(PiecewiseLinear),
    Generic(GenericDistortion),
}

const GRID_CHECK_POINTS: usize = 10_000;

impl Distortion {
    pub fn var(alpha: f64) -> Result<Self> {
        Ok(Self::Var(Level::new(alpha)?))
    }

    pub fn tvar(alpha: f64) -> Result<Self> {
        Ok(Self::Tvar(Level::new(alpha)?))
    }

    pub fn lel(alpha: f64) -> Result<Self> {
        Ok(Self::Lel(Level::new(alpha)?))
    }

    pub fn piecewise_linear(knots: Vec<(f64, f64)>) -> Result<Self> {
        Ok(Self::PiecewiseLinear(PiecewiseLinear::new(knots)?))
    }

    /// Wraps `func` after checking `D(0) = 0`, `D(1) = 1` and monotonicity
    /// on a uniform grid of 10⁴ points.
    pub fn generic<F>(name: impl Into<String>, func: F) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let name = name.into();
        let d0 = func(0.0);
        let d1 = func(1.0);
        if d0.abs() > 1e-12 || (d1 - 1.0).abs() > 1e-12 {
            return Err(Error::DegenerateDistortion(format!("{name}: need D(0)=0 and D(1)=1, got {d0}, {d1}")));
        }
        let mut grid = Vec::with_capacity(GRID_CHECK_POINTS + 1);
        grid.push(d0);
        for k in 1..=GRID_CHECK_POINTS {
            let u = k as f64 / GRID_CHECK_POINTS as f64;
            let d = func(u);
            if !d.is_finite() || d < grid[k - 1] - 1e-12 || !(-1e-12..=1.0 + 1e-12).contains(&d) {
                return Err(Error::DegenerateDistortion(format!("{name}: not a nondecreasing map into [0,1] near u={u}")));
            }
            grid.push(d);
        }
        let jumps = locate_jumps(&func, &grid);
        Ok(Self::Generic(GenericDistortion { name, func: Arc::new(func), jumps }))
    }

    /// `D(u)`.
    pub fn value(&self, u: f64) -> f64 {
        match self {
            Self::Var(l) => {
                if u >= 1.0 - l.alpha {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tvar(l) | Self::Lel(l) => ((u - (1.0 - l.alpha)) / l.alpha).clamp(0.0, 1.0),
            Self::PiecewiseLinear(pl) => pl.value(u),
            Self::Generic(g) => g.value(u),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Var(l) => format!("VaR({})", l.alpha),
            Self::Tvar(l) => format!("TVaR({})", l.alpha),
            Self::Lel(l) => format!("LEL({})", l.alpha),
            Self::PiecewiseLinear(pl) => format!("piecewise-linear({} knots)", pl.knots.len()),
            Self::Generic(g) => g.name.clone(),
        }
    }

    fn ignores_drift(&self) -> bool {
        matches!(self, Self::Lel(_))
    }
}

/// Riskless rate, measurement horizon `τ` and distortion.
#[derive(Debug, Clone)]
pub struct RiskParams {
    rate: f64,
    horizon: f64,
    distortion: Distortion,
}

impl RiskParams {
    pub fn new(rate: f64, horizon: f64, distortion: Distortion) -> Result<Self> {
        if !rate.is_finite() {
            return Err(Error::InvalidParameter(format!("rate must be finite, got {rate}")));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("risk horizon must be positive, got {horizon}")));
        }
        Ok(Self { rate, horizon, distortion })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn distortion(&self) -> &Distortion {
        &self.distortion
    }

    /// Risk of the zero strategy, `f(0, 0) = 1 − exp(rτ)`.
    pub fn floor(&self) -> f64 {
        -(self.rate * self.horizon).exp_m1()
    }

    /// `f(x, y)` for this parameter set.
    pub fn functional(&self, ret: f64, vol: f64) -> Result<f64> {
        risk_functional(ret, vol, self)
    }
}

/// Closed form of `f(x, y) = ∫ [1 − exp((r + x − y²/2)τ + N⁻¹(1−u)·y√τ)] dD(u)`.
pub fn risk_functional(ret: f64, vol: f64, params: &RiskParams) -> Result<f64> {
    if !(vol >= 0.0) {
        return Err(Error::InvalidParameter(format!("portfolio volatility must be >= 0, got {vol}")));
    }
    let tau = params.horizon;
    let r = params.rate;
    let s = vol * tau.sqrt();
    match &params.distortion {
        Distortion::Var(l) => Ok(-((r + ret - 0.5 * vol * vol) * tau + l.quantile * s).exp_m1()),
        Distortion::Tvar(l) => Ok(tail_value(r + ret, s, tau, l)),
        Distortion::Lel(l) => Ok(tail_value(r, s, tau, l)),
        Distortion::PiecewiseLinear(pl) => Ok(piecewise_linear_value(pl, (r + ret) * tau, s)),
        Distortion::Generic(g) => generic_value(g, (r + ret) * tau, s),
    }
}

// 1 − exp(drift·τ) Φ(z_α − s) / α
fn tail_value(drift: f64, s: f64, tau: f64, level: &Level) -> f64 {
    if s == 0.0 {
        return -(drift * tau).exp_m1();
    }
    let log_mean = drift * tau + normal::ln_cdf(level.quantile - s) - level.alpha.ln();
    -log_mean.exp_m1()
}

// `log_mean` is `(r + x)τ = m + s²/2`.
fn piecewise_linear_value(pl: &PiecewiseLinear, log_mean: f64, s: f64) -> f64 {
    let m = log_mean - 0.5 * s * s;
    if s == 0.0 {
        return -m.exp_m1();
    }
    let scale = log_mean.exp();
    let mut total = 0.0;
    for w in pl.knots.windows(2) {
        let (ua, da) = w[0];
        let (ub, db) = w[1];
        let mass = db - da;
        if mass == 0.0 {
            continue;
        }
        if ub == ua {
            // atom of size `mass` at u = ua
            let z = normal::quantile(1.0 - ua);
            total += mass * (1.0 - (m + s * z).exp());
        } else {
            let slope = mass / (ub - ua);
            let hi = normal::quantile(1.0 - ua);
            let lo = normal::quantile(1.0 - ub);
            let tail = normal::cdf(hi - s) - normal::cdf(lo - s);
            total += slope * ((ub - ua) - scale * tail);
        }
    }
    total
}

// Integration by parts in z = N⁻¹(1 − u):
//   f = 1 − ∫ s·exp(m + s z)·D(Φ(−z)) dz.
// Below Z_LO the argument Φ(−z) rounds to 1, so D = 1 and that piece is
// exp(m + s·Z_LO); above Z_HI it underflows to 0 and D = 0.
const Z_LO: f64 = -8.5;
const Z_HI: f64 = 38.5;
const GENERIC_TOL: f64 = 1e-9;

fn generic_value(g: &GenericDistortion, log_mean: f64, s: f64) -> Result<f64> {
    let m = log_mean - 0.5 * s * s;
    if s == 0.0 {
        return Ok(-m.exp_m1());
    }
    let lower = (m + s * Z_LO).exp();
    // fine pieces where Φ(−z) is resolved, coarse beyond; jumps of D are
    // added as breakpoints since no sampling rule sees them reliably
    let mut breaks: Vec<f64> = (0..=68)
        .map(|k| Z_LO + 0.25 * k as f64)
        .chain((1..=15).map(|k| -Z_LO + (Z_HI + Z_LO) / 15.0 * k as f64))
        .chain(g.jumps.iter().map(|&u| normal::quantile(1.0 - u)).filter(|z| *z > Z_LO && *z < Z_HI))
        .collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let body = quadrature::integrate_partitioned(
        |z| {
            let d = g.value(normal::cdf(-z));
            if d <= 0.0 {
                0.0
            } else {
                s * (m + s * z + d.ln()).exp()
            }
        },
        &breaks,
        GENERIC_TOL,
    )?;
    Ok(1.0 - lower - body)
}

/// Risk of holding `zeta` over the measurement horizon at `(t, state)`.
pub fn rho_of_strategy(zeta: &DVector<f64>, model: &MarketModel, t: f64, state: &[f64], params: &RiskParams) -> Result<f64> {
    let PortfolioStats { ret, vol } = model.portfolio_stats(zeta, t, state);
    risk_functional(ret, vol, params)
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Samples the projected loss law directly and applies the distortion to the
/// empirical quantile function. Shares nothing with [`risk_functional`]
/// beyond the loss model itself.
pub fn mc_loss_risk_oracle(ret: f64, vol: f64, params: &RiskParams, n_samples: usize, seed: u64) -> Result<OracleEstimate> {
    if n_samples < 1000 {
        return Err(Error::InvalidParameter(format!("oracle needs at least 1000 samples, got {n_samples}")));
    }
    if !(vol >= 0.0) {
        return Err(Error::InvalidParameter(format!("portfolio volatility must be >= 0, got {vol}")));
    }
    let tau = params.horizon;
    let drift = if params.distortion.ignores_drift() { 0.0 } else { ret };
    let mean = (params.rate + drift - 0.5 * vol * vol) * tau;
    if vol == 0.0 {
        return Ok(OracleEstimate { value: 1.0 - mean.exp(), std_error: 0.0 });
    }
    let sd = vol * tau.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses: Vec<f64> = (0..n_samples)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            1.0 - (mean + sd * z).exp()
        })
        .collect();

    match &params.distortion {
        Distortion::Var(l) => Ok(empirical_var(&mut losses, l.alpha)),
        Distortion::Tvar(l) | Distortion::Lel(l) => Ok(empirical_tvar(&mut losses, l.alpha)),
        d => Ok(empirical_stieltjes(&mut losses, d)),
    }
}

// 0-based index of the empirical quantile F_n⁻¹(u) = L_(⌈nu⌉).
fn quantile_index(n: usize, u: f64) -> usize {
    ((n as f64 * u).ceil() as usize).clamp(1, n) - 1
}

fn select(losses: &mut [f64], idx: usize) -> f64 {
    let (_, v, _) = losses.select_nth_unstable_by(idx, f64::total_cmp);
    *v
}

fn empirical_var(losses: &mut [f64], alpha: f64) -> OracleEstimate {
    let n = losses.len();
    let u = 1.0 - alpha;
    let value = select(losses, quantile_index(n, u));
    // Siddiqui sparsity estimate of 1/density at the quantile
    let h = 0.2 * alpha.min(1.0 - alpha);
    let upper = select(losses, quantile_index(n, u + h));
    let lower = select(losses, quantile_index(n, u - h));
    let sparsity = (upper - lower) / (2.0 * h);
    OracleEstimate { value, std_error: (alpha * (1.0 - alpha) / n as f64).sqrt() * sparsity }
}

fn empirical_tvar(losses: &mut [f64], alpha: f64) -> OracleEstimate {
    let n = losses.len();
    let nf = n as f64;
    let u = 1.0 - alpha;
    let k0 = quantile_index(n, u);
    let q = select(losses, k0);
    // the first tail cell is only partially above 1 − α
    let partial = ((k0 + 1) as f64 / nf - u) * q;
    let tail: f64 = losses[k0 + 1..].iter().sum::<f64>() / nf;
    let value = (partial + tail) / alpha;

    let scores = losses.iter().map(|&l| q + (l - q).max(0.0) / alpha);
    let (mean, m2) = scores.fold((0.0, 0.0), |(s, s2), x| (s + x, s2 + x * x));
    let mean = mean / nf;
    let var = (m2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
    OracleEstimate { value, std_error: (var / nf).sqrt() }
}

fn stieltjes_sum(sorted: &[f64], d: &Distortion) -> f64 {
    let n = sorted.len() as f64;
    let mut prev = d.value(0.0);
    sorted
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let next = d.value((k + 1) as f64 / n);
            let w = next - prev;
            prev = next;
            w * l
        })
        .sum()
}

fn empirical_stieltjes(losses: &mut [f64], d: &Distortion) -> OracleEstimate {
    const BATCHES: usize = 20;
    let batch = losses.len() / BATCHES;
    let mut estimates = Vec::with_capacity(BATCHES);
    for chunk in losses.chunks_mut(batch).take(BATCHES) {
        chunk.sort_unstable_by(f64::total_cmp);
        estimates.push(stieltjes_sum(chunk, d));
    }
    losses.sort_unstable_by(f64::total_cmp);
    let value = stieltjes_sum(losses, d);
    let b = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / b;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (b - 1.0);
    OracleEstimate { value, std_error: (var / b).sqrt() }
}
