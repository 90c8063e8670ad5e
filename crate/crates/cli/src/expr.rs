//! Market coefficients given as expressions in `t` and the Brownian state.

use std::fmt;

use evalexpr::{build_operator_tree, ContextWithMutableVariables, HashMapContext, Node, Value};
use nalgebra::{DMatrix, DVector};

use crra_core::market::Coefficients;

use crate::CliError;

pub struct ExpressionCoefficients {
    mu: Vec<Node>,
    sigma: Vec<Vec<Node>>,
    sources: Vec<String>,
    brownian: usize,
}

impl fmt::Debug for ExpressionCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExpressionCoefficients").field("sources", &self.sources).finish()
    }
}

impl ExpressionCoefficients {
    /// Variables: `t`, `w1`..`wm`, and `w` as a synonym for `w1`.
    pub fn new(mu: &[String], sigma: &[Vec<String>]) -> Result<Self, CliError> {
        let brownian = sigma.first().map_or(0, Vec::len);
        if mu.is_empty() || sigma.len() != mu.len() || brownian == 0 || sigma.iter().any(|r| r.len() != brownian) {
            return Err(CliError::Config(
                "expression market needs one sigma row per mu entry, all rows of equal non-zero length".into(),
            ));
        }
        let mut allowed = vec!["t".to_string(), "w".to_string()];
        allowed.extend((1..=brownian).map(|k| format!("w{k}")));
        let compile = |src: &String| -> Result<Node, CliError> {
            let node =
                build_operator_tree(src).map_err(|e| CliError::Config(format!("expression {src:?}: {e}")))?;
            if let Some(bad) = node.iter_variable_identifiers().find(|v| !allowed.iter().any(|a| a == v)) {
                return Err(CliError::Config(format!("expression {src:?}: unknown variable {bad}")));
            }
            Ok(node)
        };
        let coeffs = Self {
            mu: mu.iter().map(compile).collect::<Result<_, _>>()?,
            sigma: sigma.iter().map(|r| r.iter().map(compile).collect()).collect::<Result<_, _>>()?,
            sources: mu.iter().chain(sigma.iter().flatten()).cloned().collect(),
            brownian,
        };
        // surface evaluation errors at load time
        let origin = vec![0.0; brownian];
        let ctx = coeffs.context(0.0, &origin);
        for node in coeffs.mu.iter().chain(coeffs.sigma.iter().flatten()) {
            node.eval_number_with_context(&ctx).map_err(|e| CliError::Config(format!("expression: {e}")))?;
        }
        Ok(coeffs)
    }

    fn context(&self, t: f64, state: &[f64]) -> HashMapContext {
        let mut ctx = HashMapContext::new();
        let mut set = |name: String, v: f64| ctx.set_value(name, Value::Float(v)).expect("float variable");
        set("t".into(), t);
        set("w".into(), state[0]);
        for (k, &w) in state.iter().enumerate() {
            set(format!("w{}", k + 1), w);
        }
        ctx
    }

    fn eval(node: &Node, ctx: &HashMapContext) -> f64 {
        // checked at construction; a later failure (e.g. a branch never
        // taken at the origin) yields NaN, which the market rejects
        node.eval_number_with_context(ctx).unwrap_or(f64::NAN)
    }
}

impl Coefficients for ExpressionCoefficients {
    fn assets(&self) -> usize {
        self.mu.len()
    }
    fn brownian_dim(&self) -> usize {
        self.brownian
    }
    fn excess_return(&self, t: f64, state: &[f64]) -> DVector<f64> {
        let ctx = self.context(t, state);
        DVector::from_iterator(self.mu.len(), self.mu.iter().map(|n| Self::eval(n, &ctx)))
    }
    fn volatility(&self, t: f64, state: &[f64]) -> DMatrix<f64> {
        let ctx = self.context(t, state);
        DMatrix::from_fn(self.mu.len(), self.brownian, |i, j| Self::eval(&self.sigma[i][j], &ctx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_drift_as_expression() {
        let c = ExpressionCoefficients::new(&["if(w >= -1 && w <= 1, 1.0, 0.0)".into()], &[vec!["1.0".into()]]).unwrap();
        assert_eq!(c.excess_return(0.0, &[0.5])[0], 1.0);
        assert_eq!(c.excess_return(0.0, &[-1.5])[0], 0.0);
        assert_eq!(c.volatility(0.3, &[0.0])[(0, 0)], 1.0);
    }

    #[test]
    fn unknown_variable_rejected() {
        assert!(ExpressionCoefficients::new(&["x + 1".into()], &[vec!["1".into()]]).is_err());
        assert!(ExpressionCoefficients::new(&["w2".into()], &[vec!["1".into()]]).is_err());
    }
}
