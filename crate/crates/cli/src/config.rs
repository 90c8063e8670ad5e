//! Experiment configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crra_core::bsde::{RiskLimit, Scheme, SolverConfig};
use crra_core::market::{Coefficients, ConstantCoefficients, IndicatorDrift, MarketModel, TimeGrid};
use crra_core::regression::BasisSpec;
use crra_core::risk::Distortion;

use crate::expr::ExpressionCoefficients;
use crate::CliError;

/// Name reserved for the baseline run without a risk limit.
pub const BASELINE: &str = "unconstrained";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub market: MarketConfig,
    pub utility: UtilityConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default, rename = "scenario")]
    pub scenarios: Vec<ScenarioConfig>,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarketConfig {
    Constant {
        #[serde(default)]
        rate: f64,
        mu: Vec<f64>,
        /// Rows are assets, columns Brownian motions.
        sigma: Vec<Vec<f64>>,
    },
    /// Drift `inside` while `lower ≤ W[coordinate] ≤ upper`, else `outside`.
    IndicatorDrift {
        #[serde(default)]
        rate: f64,
        inside: Vec<f64>,
        outside: Vec<f64>,
        lower: f64,
        upper: f64,
        #[serde(default)]
        coordinate: usize,
        sigma: Vec<Vec<f64>>,
    },
    /// Coefficients as expressions in `t` and `w1..wm` (`w` for `w1`).
    Expression {
        #[serde(default)]
        rate: f64,
        mu: Vec<String>,
        sigma: Vec<Vec<String>>,
    },
}

impl MarketConfig {
    pub fn rate(&self) -> f64 {
        match self {
            Self::Constant { rate, .. } | Self::IndicatorDrift { rate, .. } | Self::Expression { rate, .. } => *rate,
        }
    }

    pub fn build(&self) -> Result<MarketModel, CliError> {
        let coefficients: Arc<dyn Coefficients> = match self {
            Self::Constant { mu, sigma, .. } => {
                Arc::new(ConstantCoefficients::new(DVector::from_vec(mu.clone()), matrix("market.sigma", sigma)?)?)
            }
            Self::IndicatorDrift { inside, outside, lower, upper, coordinate, sigma, .. } => Arc::new(IndicatorDrift::new(
                DVector::from_vec(inside.clone()),
                DVector::from_vec(outside.clone()),
                *lower,
                *upper,
                *coordinate,
                matrix("market.sigma", sigma)?,
            )?),
            Self::Expression { mu, sigma, .. } => Arc::new(ExpressionCoefficients::new(mu, sigma)?),
        };
        Ok(MarketModel::new(self.rate(), coefficients)?)
    }
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::Config(format!("{field} must be a non-empty rectangular array of rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityConfig {
    /// Exponent of `U(x) = x^p / p`.
    pub p: f64,
    #[serde(default = "one")]
    pub wealth: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_paths() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "forward")]
    pub scheme: SchemeName,
    #[serde(default)]
    pub basis: BasisConfig,
    /// Radial clamp on `Z`; derived from the market when absent.
    #[serde(default)]
    pub truncation: Option<f64>,
    #[serde(default)]
    pub picard: PicardConfig,
    #[serde(default = "yes")]
    pub centered_z: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            scheme: SchemeName::Forward,
            basis: BasisConfig::default(),
            truncation: None,
            picard: PicardConfig::default(),
            centered_z: true,
        }
    }
}

fn forward() -> SchemeName {
    SchemeName::Forward
}

fn yes() -> bool {
    true
}

impl SolverSection {
    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            basis: self.basis.spec(),
            max_iters: self.picard.max_iters,
            tol: self.picard.tol,
            scheme: self.scheme.scheme(),
            centered_z: self.centered_z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Forward,
    Backward,
}

impl SchemeName {
    pub fn scheme(self) -> Scheme {
        match self {
            Self::Forward => Scheme::Forward,
            Self::Backward => Scheme::Backward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisConfig {
    Hermite { degree: usize },
    Indicator { bins: usize },
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self::Hermite { degree: 3 }
    }
}

impl BasisConfig {
    pub fn spec(self) -> BasisSpec {
        match self {
            Self::Hermite { degree } => BasisSpec::Hermite { degree },
            Self::Indicator { bins } => BasisSpec::Indicator { bins },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self { tol: default_tol(), max_iters: default_iters() }
    }
}

fn default_tol() -> f64 {
    1e-4
}

fn default_iters() -> usize {
    30
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Var,
    Tvar,
    Lel,
    /// Piecewise-linear distortion read from `distortion_file`.
    Generic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub measure: Measure,
    #[serde(default)]
    pub alpha: Option<f64>,
    pub bound: f64,
    pub tau: f64,
    #[serde(default)]
    pub distortion_file: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn distortion(&self) -> Result<Distortion, CliError> {
        let alpha = || {
            self.alpha.ok_or_else(|| CliError::Config(format!("scenario {}: measure needs alpha", self.name)))
        };
        Ok(match self.measure {
            Measure::Var => Distortion::var(alpha()?)?,
            Measure::Tvar => Distortion::tvar(alpha()?)?,
            Measure::Lel => Distortion::lel(alpha()?)?,
            Measure::Generic => {
                let path = self.distortion_file.as_ref().ok_or_else(|| {
                    CliError::Config(format!("scenario {}: generic measure needs distortion_file", self.name))
                })?;
                Distortion::piecewise_linear(read_knots(path)?)?
            }
        })
    }

    pub fn limit(&self) -> Result<RiskLimit, CliError> {
        Ok(RiskLimit::new(self.distortion()?, self.tau, self.bound))
    }
}

/// Knots `u,D(u)` one per line; `#` starts a comment and a non-numeric
/// first line is taken as a header.
pub fn read_knots(path: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read distortion file {}: {e}", path.display())))?;
    let mut knots = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse().ok()).collect();
        match parsed {
            Some(v) if v.len() == 2 => knots.push((v[0], v[1])),
            None if knots.is_empty() && k == 0 => continue,
            _ => {
                return Err(CliError::Config(format!("{}:{}: expected `u,D`, got {raw:?}", path.display(), k + 1)));
            }
        }
    }
    Ok(knots)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Out-of-sample paths for the martingale check; 0 disables it.
    #[serde(default)]
    pub martingale_paths: usize,
    /// Also solve with the backward scheme and report its `Y(0)`.
    #[serde(default)]
    pub cross_check: bool,
    #[serde(default = "default_oracle_points")]
    pub oracle_points: usize,
    #[serde(default = "default_oracle_samples")]
    pub oracle_samples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            martingale_paths: 0,
            cross_check: false,
            oracle_points: default_oracle_points(),
            oracle_samples: default_oracle_samples(),
        }
    }
}

fn default_oracle_points() -> usize {
    20
}

fn default_oracle_samples() -> usize {
    200_000
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    /// Reads `path`; relative distortion files resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut cfg.scenarios {
            if let Some(f) = &s.distortion_file {
                if f.is_relative() {
                    s.distortion_file = Some(base.join(f));
                }
            }
        }
        Ok(cfg)
    }

    pub fn time_grid(&self) -> Result<TimeGrid, CliError> {
        Ok(TimeGrid::new(self.grid.horizon, self.grid.steps)?)
    }

    /// Checks every domain constraint that can be checked without solving.
    pub fn validate(&self) -> Result<(), CliError> {
        let p = self.utility.p;
        if !(p > 0.0 && p < 1.0) {
            return Err(CliError::Config(format!("utility.p must lie in (0, 1), got {p}")));
        }
        if !(self.utility.wealth > 0.0) {
            return Err(CliError::Config(format!("utility.wealth must be positive, got {}", self.utility.wealth)));
        }
        if self.grid.paths < 2 {
            return Err(CliError::Config(format!("grid.paths must be at least 2, got {}", self.grid.paths)));
        }
        self.time_grid()?;
        let model = self.market.build()?;
        model.point(0.0, &vec![0.0; model.brownian_dim()])?;
        self.solver.basis.spec().validate()?;
        if let Some(m) = self.solver.truncation {
            if !(m > 0.0) {
                return Err(CliError::Config(format!("solver.truncation must be positive, got {m}")));
            }
        }
        let cfg = self.solver.solver_config();
        if cfg.max_iters == 0 || !(cfg.tol > 0.0) {
            return Err(CliError::Config("solver.picard needs max_iters >= 1 and tol > 0".into()));
        }
        let mut names = vec![BASELINE.to_string()];
        for s in &self.scenarios {
            if s.name.is_empty() || !s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(CliError::Config(format!("scenario name {:?} must be non-empty [A-Za-z0-9_-]", s.name)));
            }
            if names.contains(&s.name) {
                return Err(CliError::Config(format!("duplicate or reserved scenario name {:?}", s.name)));
            }
            names.push(s.name.clone());
            if !(s.bound < 1.0) {
                return Err(CliError::Config(format!("scenario {}: bound must be below 1, got {}", s.name, s.bound)));
            }
            if !(s.tau > 0.0) {
                return Err(CliError::Config(format!("scenario {}: tau must be positive, got {}", s.name, s.tau)));
            }
            crra_core::bsde::DriverParams::new(p, model.clone(), Some(s.limit()?))?;
        }
        Ok(())
    }
}
