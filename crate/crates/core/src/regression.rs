//! Least-squares conditional expectations on functions of the Brownian state.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::normal;

const MAX_GRAM_CONDITION: f64 = 1e12;

/// Regression basis on the state `W_t ∈ ℝᵐ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisSpec {
    /// Tensor products of normalized Hermite polynomials `He_k(w/√t)/√k!`
    /// with `k ≤ degree` in every coordinate.
    Hermite { degree: usize },
    /// Indicators of a tensor grid of cells, each axis split into `bins`
    /// intervals of equal probability under `N(0, t)`.
    Indicator { bins: usize },
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self::Hermite { degree: 3 }
    }
}

impl BasisSpec {
    pub fn id(&self) -> String {
        match self {
            Self::Hermite { degree } => format!("hermite-{degree}"),
            Self::Indicator { bins } => format!("indicator-{bins}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Hermite { degree } if degree > 12 => {
                Err(Error::InvalidParameter(format!("Hermite degree {degree} is too high")))
            }
            Self::Indicator { bins } if bins == 0 => Err(Error::InvalidParameter("indicator basis needs bins >= 1".into())),
            _ => Ok(()),
        }
    }

    /// Number of functions for a state of dimension `dim` at a time `t > 0`.
    pub fn size(&self, dim: usize) -> usize {
        match *self {
            Self::Hermite { degree } => (degree + 1).pow(dim as u32),
            Self::Indicator { bins } => bins.pow(dim as u32),
        }
    }

    /// Basis functions at `(t, state)` written into `out`. At `t = 0` the
    /// state is deterministic and only the constant is used.
    pub fn eval_into(&self, t: f64, state: &[f64], out: &mut Vec<f64>) {
        out.clear();
        if t <= 0.0 {
            out.push(1.0);
            return;
        }
        let scale = t.sqrt();
        match *self {
            Self::Hermite { degree } => {
                let per_axis: Vec<Vec<f64>> = state.iter().map(|&w| hermite(w / scale, degree)).collect();
                tensor(&per_axis, degree + 1, out);
            }
            Self::Indicator { bins } => {
                let total = bins.pow(state.len() as u32);
                out.resize(total, 0.0);
                let mut cell = 0;
                for &w in state.iter().rev() {
                    cell = cell * bins + bin_of(normal::cdf(w / scale), bins);
                }
                out[cell] = 1.0;
            }
        }
    }

    pub fn eval(&self, t: f64, state: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        self.eval_into(t, state, &mut out);
        out
    }
}

fn bin_of(u: f64, bins: usize) -> usize {
    ((u * bins as f64) as usize).min(bins - 1)
}

fn hermite(x: f64, degree: usize) -> Vec<f64> {
    let mut he = Vec::with_capacity(degree + 1);
    he.push(1.0);
    if degree >= 1 {
        he.push(x);
    }
    for k in 1..degree {
        let next = x * he[k] - k as f64 * he[k - 1];
        he.push(next);
    }
    let mut fact = 1.0;
    for (k, v) in he.iter_mut().enumerate().skip(1) {
        fact *= k as f64;
        *v /= fact.sqrt();
    }
    he
}

// first coordinate varies fastest
fn tensor(per_axis: &[Vec<f64>], len: usize, out: &mut Vec<f64>) {
    out.push(1.0);
    for axis in per_axis {
        let prev = std::mem::take(out);
        out.reserve(prev.len() * len);
        for a in axis {
            for p in &prev {
                out.push(p * a);
            }
        }
    }
}

/// Design matrix and factorized normal equations for one time step.
#[derive(Debug, Clone)]
pub struct StepRegression {
    design: DMatrix<f64>,
    gram: Cholesky<f64, Dyn>,
}

impl StepRegression {
    /// Builds the design matrix for the given states (one row per path).
    pub fn new<'a, I>(basis: &BasisSpec, t: f64, states: I, step: usize) -> Result<Self>
    where
        I: ExactSizeIterator<Item = &'a [f64]>,
    {
        let rows = states.len();
        let mut buf = Vec::new();
        let mut data: Vec<f64> = Vec::new();
        let mut cols = 0;
        for s in states {
            basis.eval_into(t, s, &mut buf);
            cols = buf.len();
            data.extend_from_slice(&buf);
        }
        if rows == 0 || rows < cols {
            return Err(Error::RegressionRankDeficient { step });
        }
        let design = DMatrix::from_row_slice(rows, cols, &data);
        let gram_matrix = design.tr_mul(&design) / rows as f64;
        let eig = gram_matrix.clone().symmetric_eigenvalues();
        let (min, max) = (eig.min(), eig.max());
        if !(min > 0.0 && max / min <= MAX_GRAM_CONDITION) {
            return Err(Error::RegressionRankDeficient { step });
        }
        let gram = Cholesky::new(gram_matrix).ok_or(Error::RegressionRankDeficient { step })?;
        Ok(Self { design, gram })
    }

    pub fn len(&self) -> usize {
        self.design.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.design.ncols() == 0
    }

    /// Least-squares coefficients for each column of `targets`.
    pub fn fit(&self, targets: &DMatrix<f64>) -> DMatrix<f64> {
        let rhs = self.design.tr_mul(targets) / self.design.nrows() as f64;
        self.gram.solve(&rhs)
    }

    pub fn fit_vector(&self, targets: &DVector<f64>) -> DVector<f64> {
        let rhs = self.design.tr_mul(targets) / self.design.nrows() as f64;
        self.gram.solve(&rhs)
    }

    /// In-sample fitted values for coefficient matrix `coef`.
    pub fn predict(&self, coef: &DMatrix<f64>) -> DMatrix<f64> {
        &self.design * coef
    }

    pub fn predict_vector(&self, coef: &DVector<f64>) -> DVector<f64> {
        &self.design * coef
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_values() {
        let he = hermite(2.0, 3);
        assert_eq!(he[0], 1.0);
        assert_eq!(he[1], 2.0);
        assert!((he[2] - 3.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((he[3] - 2.0 / 6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn basis_sizes() {
        let b = BasisSpec::Hermite { degree: 3 };
        assert_eq!(b.eval(0.5, &[0.1, -0.2]).len(), 16);
        assert_eq!(b.eval(0.0, &[0.0, 0.0]), vec![1.0]);
        let ind = BasisSpec::Indicator { bins: 4 };
        let v = ind.eval(1.0, &[0.0, 10.0]);
        assert_eq!(v.len(), 16);
        assert_eq!(v.iter().sum::<f64>(), 1.0);
        assert_eq!(v[3 * 4 + 2], 1.0);
    }

    #[test]
    fn recovers_polynomial_exactly() {
        let states: Vec<[f64; 1]> = (0..200).map(|k| [(k as f64 - 100.0) / 30.0]).collect();
        let reg = StepRegression::new(&BasisSpec::Hermite { degree: 3 }, 1.0, states.iter().map(|s| &s[..]), 1).unwrap();
        let y = DVector::from_iterator(200, states.iter().map(|s| 1.0 - 2.0 * s[0] + 0.5 * s[0].powi(3)));
        let fit = reg.predict_vector(&reg.fit_vector(&y));
        assert!((fit - y).amax() < 1e-10);
    }

    #[test]
    fn too_few_rows_is_rank_deficient() {
        let states = [[0.1], [0.2]];
        let err = StepRegression::new(&BasisSpec::Hermite { degree: 3 }, 1.0, states.iter().map(|s| &s[..]), 4);
        assert_eq!(err.unwrap_err(), Error::RegressionRankDeficient { step: 4 });
        let same = [[0.3]; 10];
        assert!(StepRegression::new(&BasisSpec::Hermite { degree: 2 }, 1.0, same.iter().map(|s| &s[..]), 2).is_err());
    }
}
