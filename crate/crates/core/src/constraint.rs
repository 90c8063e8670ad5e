//! Risk acceptance sets `A = {ζ : f(ζ'μ, ‖ζ'σ‖) ≤ K}` and projection onto
//! their image `Ã = {ζ'σ : ζ ∈ A}` in volatility space.
//!
//! In exposure coordinates `w = σ'ζ` the two portfolio statistics are
//! `ζ'μ = w·θ` and `‖ζ'σ‖ = ‖w‖`, so `Ã` is a body of revolution about `θ`
//! inside the row space of `σ`. The nearest point to any `v` therefore lies
//! in the half plane spanned by `θ` and `v`, and projection becomes a search
//! over one boundary angle. Each ray from the origin meets the set in an
//! interval (the log of the loss quantile or tail mean is concave along
//! rays for VaR and TVaR), so the boundary is `ρ = R(φ)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::market::{MarketPoint, DEFAULT_CONDITION_BOUND};
use crate::risk::RiskParams;

/// Slack on `f ≤ K` absorbing rounding at the boundary.
pub const CONTAINS_TOL: f64 = 1e-12;
const UNBOUNDED_RADIUS: f64 = 1e9;
const RADIUS_TOL: f64 = 1e-11;
const SCAN_ANGLES: usize = 33;
const ANGLE_TOL: f64 = 1e-11;

/// Acceptance set data frozen at one `(t, state)`.
#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    risk: Option<(RiskParams, f64)>,
    point: MarketPoint,
}

impl ConstraintSpec {
    /// Risk constraint `f ≤ bound`; requires `f(0, 0) ≤ bound < 1`.
    pub fn new(params: RiskParams, bound: f64, mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        Self::from_point(params, bound, MarketPoint::new(mu, sigma, DEFAULT_CONDITION_BOUND)?)
    }

    pub fn from_point(params: RiskParams, bound: f64, point: MarketPoint) -> Result<Self> {
        let min = params.functional(0.0, 0.0)?;
        if !(bound >= min && bound < 1.0) {
            return Err(Error::InvalidRiskBound { bound, min });
        }
        Ok(Self { risk: Some((params, bound)), point })
    }

    /// No risk constraint: `Ã` is the whole space.
    pub fn unconstrained(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        Ok(Self::unconstrained_at(MarketPoint::new(mu, sigma, DEFAULT_CONDITION_BOUND)?))
    }

    pub fn unconstrained_at(point: MarketPoint) -> Self {
        Self { risk: None, point }
    }

    pub fn is_unconstrained(&self) -> bool {
        self.risk.is_none()
    }
    pub fn params(&self) -> Option<&RiskParams> {
        self.risk.as_ref().map(|(p, _)| p)
    }
    pub fn bound(&self) -> Option<f64> {
        self.risk.as_ref().map(|(_, k)| *k)
    }
    pub fn point(&self) -> &MarketPoint {
        &self.point
    }

    /// Precomputes the boundary profile used by [`ConstraintSet::project`].
    pub fn compile(self) -> Result<ConstraintSet> {
        ConstraintSet::new(self)
    }
}

/// Result of projecting onto `Ã`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// Nearest point of `Ã`.
    pub point: DVector<f64>,
    /// `‖z̃ − point‖`.
    pub distance: f64,
    /// Minimum-norm `ζ` with `ζ'σ = point`.
    pub zeta: DVector<f64>,
}

#[derive(Debug, Clone)]
enum Shape {
    Unconstrained,
    /// `θ = 0`: a ball of the given radius.
    Ball(f64),
    /// One risky asset: the segment `[-back, forward]` along `θ̂`.
    Segment { forward: f64, back: f64 },
    /// Boundary radii at `SCAN_ANGLES` equally spaced angles in `[0, π]`.
    Revolution { radii: Vec<f64> },
}

/// A [`ConstraintSpec`] with its boundary profile precomputed.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    spec: ConstraintSpec,
    theta_norm: f64,
    theta_unit: DVector<f64>,
    shape: Shape,
}

impl ConstraintSet {
    fn new(spec: ConstraintSpec) -> Result<Self> {
        let theta = spec.point.market_price_of_risk().clone();
        let theta_norm = theta.norm();
        let theta_unit = if theta_norm > 0.0 { theta / theta_norm } else { theta };
        let mut set = Self { spec, theta_norm, theta_unit, shape: Shape::Unconstrained };
        if set.spec.is_unconstrained() {
            return Ok(set);
        }
        set.shape = if theta_norm == 0.0 {
            Shape::Ball(set.exposure_radius(0.0)?)
        } else if set.spec.point.assets() == 1 {
            Shape::Segment { forward: set.exposure_radius(0.0)?, back: set.exposure_radius(PI)? }
        } else {
            let radii = (0..SCAN_ANGLES)
                .map(|k| set.exposure_radius(scan_angle(k)))
                .collect::<Result<Vec<_>>>()?;
            Shape::Revolution { radii }
        };
        Ok(set)
    }

    pub fn spec(&self) -> &ConstraintSpec {
        &self.spec
    }

    fn risk_at(&self, ret: f64, vol: f64) -> Result<f64> {
        match &self.spec.risk {
            None => Ok(f64::NEG_INFINITY),
            Some((params, _)) => params.functional(ret, vol),
        }
    }

    fn accepts(&self, ret: f64, vol: f64) -> Result<bool> {
        match &self.spec.risk {
            None => Ok(true),
            Some((params, bound)) => Ok(params.functional(ret, vol)? <= bound + CONTAINS_TOL),
        }
    }

    /// `f(ζ'μ, ‖ζ'σ‖) ≤ K` up to [`CONTAINS_TOL`].
    pub fn contains(&self, zeta: &DVector<f64>) -> Result<bool> {
        let stats = self.spec.point.stats(zeta);
        self.accepts(stats.ret, stats.vol)
    }

    /// Risk `f(ζ'μ, ‖ζ'σ‖)` of `zeta`; `-inf` when unconstrained.
    pub fn risk(&self, zeta: &DVector<f64>) -> Result<f64> {
        let stats = self.spec.point.stats(zeta);
        self.risk_at(stats.ret, stats.vol)
    }

    // sup{s ≥ 0 : f(s·ret_rate, s·vol_rate) ≤ K}
    fn ray_exit(&self, ret_rate: f64, vol_rate: f64) -> Result<f64> {
        let mut lo = 0.0;
        let mut hi = 0.1 / vol_rate.max(f64::MIN_POSITIVE);
        while self.accepts(hi * ret_rate, hi * vol_rate)? {
            lo = hi;
            hi *= 2.0;
            if lo > UNBOUNDED_RADIUS {
                return Err(Error::UnboundedDirection(lo));
            }
        }
        while hi - lo > RADIUS_TOL * hi.max(1.0) {
            let mid = 0.5 * (lo + hi);
            if self.accepts(mid * ret_rate, mid * vol_rate)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(lo)
    }

    /// Boundary radius in exposure space at angle `phi` from `θ̂`.
    fn exposure_radius(&self, phi: f64) -> Result<f64> {
        self.ray_exit(self.theta_norm * phi.cos(), 1.0)
    }

    /// `sup{s ≥ 0 : contains(s·direction)}` for a unit `direction`.
    pub fn boundary_radius(&self, direction: &DVector<f64>) -> Result<f64> {
        if self.spec.is_unconstrained() {
            return Err(Error::InvalidParameter("boundary_radius of an unconstrained set".into()));
        }
        let stats = self.spec.point.stats(direction);
        self.ray_exit(stats.ret, stats.vol)
    }

    /// Half width of a `ζ` box covering the set, from the largest exposure
    /// radius and the smallest singular value of `σ`.
    pub fn covering_halfwidth(&self) -> Result<f64> {
        let max_radius = match &self.shape {
            Shape::Unconstrained => {
                return Err(Error::InvalidParameter("unconstrained set is not bounded".into()))
            }
            Shape::Ball(r) => *r,
            Shape::Segment { forward, back } => forward.max(*back),
            Shape::Revolution { .. } => {
                let mut m = 0.0f64;
                for k in 0..=512 {
                    m = m.max(self.exposure_radius(PI * k as f64 / 512.0)?);
                }
                m
            }
        };
        let sigma = self.spec.point.sigma();
        let gram = sigma * sigma.transpose();
        let smin = gram.symmetric_eigenvalues().min().max(0.0).sqrt();
        Ok(1.05 * max_radius / smin)
    }

    fn finish(&self, z: &DVector<f64>, point: DVector<f64>) -> Projection {
        let distance = (z - &point).norm();
        let zeta = self.spec.point.preimage(&point);
        Projection { point, distance, zeta }
    }

    /// Nearest point of `Ã` to `z`.
    pub fn project(&self, z: &DVector<f64>) -> Result<Projection> {
        let v = match &self.shape {
            Shape::Unconstrained => return Ok(self.finish(z, z.clone())),
            _ => self.spec.point.project_row_space(z),
        };
        if self.accepts(v.dot(&self.theta_unit) * self.theta_norm, v.norm())? {
            return Ok(self.finish(z, v));
        }
        let point = match &self.shape {
            Shape::Unconstrained => unreachable!(),
            Shape::Ball(r) => &v * (r / v.norm()),
            Shape::Segment { forward, back } => {
                let a = v.dot(&self.theta_unit).clamp(-back, *forward);
                &self.theta_unit * a
            }
            Shape::Revolution { radii } => self.project_revolution(&v, radii)?,
        };
        Ok(self.finish(z, point))
    }

    fn project_revolution(&self, v: &DVector<f64>, radii: &[f64]) -> Result<DVector<f64>> {
        let a = v.dot(&self.theta_unit);
        let perp = v - &self.theta_unit * a;
        let b = perp.norm();
        let gap = |phi: f64, r: f64| (a - r * phi.cos()).powi(2) + (b - r * phi.sin()).powi(2);

        let values: Vec<f64> = (0..SCAN_ANGLES).map(|k| gap(scan_angle(k), radii[k])).collect();
        let mut minima: Vec<usize> = (0..SCAN_ANGLES)
            .filter(|&k| {
                let left = k == 0 || values[k] <= values[k - 1];
                let right = k + 1 == SCAN_ANGLES || values[k] <= values[k + 1];
                left && right
            })
            .collect();
        minima.sort_by(|&i, &j| values[i].total_cmp(&values[j]));

        let mut best = (f64::INFINITY, 0.0, 0.0);
        for &k in minima.iter().take(3) {
            let lo = scan_angle(k.saturating_sub(1));
            let hi = scan_angle((k + 1).min(SCAN_ANGLES - 1));
            let (phi, r) = self.golden_angle(lo, hi, &gap)?;
            let g = gap(phi, r);
            if g < best.0 {
                best = (g, phi, r);
            }
        }
        let (_, phi, r) = best;
        let along = r * phi.cos();
        let across = r * phi.sin();
        if across == 0.0 {
            return Ok(&self.theta_unit * along);
        }
        let unit_perp = if b > 1e-12 * v.norm().max(1.0) { perp / b } else { self.tie_break_direction(along, across) };
        Ok(&self.theta_unit * along + unit_perp * across)
    }

    // The optimum is a circle of candidates when v lies on the θ axis; pick
    // a fixed orthogonal direction, and its sign by smaller then
    // lexicographically smaller ζ.
    fn tie_break_direction(&self, along: f64, across: f64) -> DVector<f64> {
        let sigma = self.spec.point.sigma();
        let mut u = DVector::zeros(sigma.ncols());
        for k in 0..sigma.nrows() {
            let row = sigma.row(k).transpose();
            let cand = &row - &self.theta_unit * row.dot(&self.theta_unit);
            if cand.norm() > 1e-8 * row.norm() {
                u = &cand / cand.norm();
                break;
            }
        }
        let pre = |s: f64| self.spec.point.preimage(&(&self.theta_unit * along + &u * (s * across)));
        let (plus, minus) = (pre(1.0), pre(-1.0));
        let key = |z: &DVector<f64>| z.norm();
        let pick_minus = match key(&minus).total_cmp(&key(&plus)) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => lexicographic(&minus, &plus) == std::cmp::Ordering::Less,
        };
        if pick_minus {
            -u
        } else {
            u
        }
    }

    fn golden_angle(&self, mut lo: f64, mut hi: f64, gap: &dyn Fn(f64, f64) -> f64) -> Result<(f64, f64)> {
        const INV_PHI: f64 = 0.618_033_988_749_894_8;
        let eval = |phi: f64| -> Result<(f64, f64)> {
            let r = self.exposure_radius(phi)?;
            Ok((gap(phi, r), r))
        };
        let mut x1 = hi - INV_PHI * (hi - lo);
        let mut x2 = lo + INV_PHI * (hi - lo);
        let mut f1 = eval(x1)?;
        let mut f2 = eval(x2)?;
        while hi - lo > ANGLE_TOL {
            if f1.0 <= f2.0 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - INV_PHI * (hi - lo);
                f1 = eval(x1)?;
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + INV_PHI * (hi - lo);
                f2 = eval(x2)?;
            }
        }
        // the bracket endpoints are candidates too
        let mut best = if f1.0 <= f2.0 { (x1, f1) } else { (x2, f2) };
        for end in [lo, hi] {
            let e = eval(end)?;
            if e.0 < best.1 .0 {
                best = (end, e);
            }
        }
        Ok((best.0, best.1 .1))
    }

    /// Exhaustive grid search over `ζ ∈ [-h, h]ⁿ` with spacing `resolution`,
    /// keeping the feasible point nearest `z` (ties: smaller `‖ζ‖`, then
    /// lexicographic).
    pub fn project_bruteforce(&self, z: &DVector<f64>, box_halfwidth: f64, resolution: f64) -> Result<Projection> {
        let n = self.spec.point.assets();
        self.project_bruteforce_around(z, &DVector::zeros(n), box_halfwidth, resolution)
    }

    /// [`project_bruteforce`](Self::project_bruteforce) over the box
    /// `center + [-h, h]ⁿ`.
    pub fn project_bruteforce_around(
        &self,
        z: &DVector<f64>,
        center: &DVector<f64>,
        box_halfwidth: f64,
        resolution: f64,
    ) -> Result<Projection> {
        if !(box_halfwidth > 0.0 && resolution > 0.0) {
            return Err(Error::InvalidParameter("box half width and resolution must be positive".into()));
        }
        let n = self.spec.point.assets();
        if center.len() != n {
            return Err(Error::InvalidParameter(format!("box center has {} entries, expected {n}", center.len())));
        }
        let per_axis = (2.0 * box_halfwidth / resolution).round() as usize + 1;
        let coord = move |d: usize, i: usize| center[d] - box_halfwidth + i as f64 * resolution;
        let rest: usize = per_axis.pow((n - 1) as u32);

        let candidates: Vec<Option<(f64, f64, DVector<f64>)>> = (0..per_axis)
            .into_par_iter()
            .map(|i0| -> Result<Option<(f64, f64, DVector<f64>)>> {
                let mut best: Option<(f64, f64, DVector<f64>)> = None;
                let mut zeta = DVector::zeros(n);
                for flat in 0..rest {
                    zeta[0] = coord(0, i0);
                    let mut q = flat;
                    for d in 1..n {
                        zeta[d] = coord(d, q % per_axis);
                        q /= per_axis;
                    }
                    if !self.contains(&zeta)? {
                        continue;
                    }
                    let dist = (z - self.spec.point.exposure(&zeta)).norm();
                    let norm = zeta.norm();
                    if best.as_ref().map_or(true, |b| better(dist, norm, &zeta, b)) {
                        best = Some((dist, norm, zeta.clone()));
                    }
                }
                Ok(best)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut best: Option<(f64, f64, DVector<f64>)> = None;
        for cand in candidates.into_iter().flatten() {
            if best.as_ref().map_or(true, |b| better(cand.0, cand.1, &cand.2, b)) {
                best = Some(cand);
            }
        }
        let zeta = best.map(|b| b.2).unwrap_or_else(|| DVector::zeros(n));
        let point = self.spec.point.exposure(&zeta);
        Ok(Projection { distance: (z - &point).norm(), point, zeta })
    }
}

fn scan_angle(k: usize) -> f64 {
    PI * k as f64 / (SCAN_ANGLES - 1) as f64
}

fn lexicographic(a: &DVector<f64>, b: &DVector<f64>) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

fn better(dist: f64, norm: f64, zeta: &DVector<f64>, incumbent: &(f64, f64, DVector<f64>)) -> bool {
    use std::cmp::Ordering::*;
    match dist.total_cmp(&incumbent.0) {
        Less => true,
        Greater => false,
        Equal => match norm.total_cmp(&incumbent.1) {
            Less => true,
            Greater => false,
            Equal => lexicographic(zeta, &incumbent.2) == Less,
        },
    }
}
