//! Standard normal distribution helpers.

use libm::erfc;
use statrs::function::erf::erfc_inv;
use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal CDF.
pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal quantile. Returns `±inf` at the endpoints.
pub fn quantile(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else if p > 0.5 {
        -quantile(1.0 - p)
    } else {
        // erfc_inv alone is good to about 1e-10; one Halley step polishes it
        let x = -SQRT_2 * erfc_inv(2.0 * p);
        let density = pdf(x);
        if density == 0.0 {
            return x;
        }
        let e = (cdf(x) - p) / density;
        x - e / (1.0 + 0.5 * x * e)
    }
}

pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// `ln Φ(x)`, accurate far into the lower tail where `Φ` underflows.
pub fn ln_cdf(x: f64) -> f64 {
    if x > -30.0 {
        return cdf(x).ln();
    }
    // Mills-ratio asymptotic series.
    let x2 = x * x;
    let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
    -0.5 * x2 - LN_SQRT_2PI - (-x).ln() + series.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_reference_values() {
        // scipy.stats.norm.ppf
        assert!((quantile(0.10) + 1.281_551_565_544_600_4).abs() < 1e-12);
        assert!((quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((quantile(1e-10) + 6.361_340_902_404_056).abs() < 1e-9);
        assert_eq!(quantile(0.5), 0.0);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for k in 1..1000 {
            let p = k as f64 / 1000.0;
            assert!((cdf(quantile(p)) - p).abs() < 1e-12, "p={p}");
        }
    }

    #[test]
    fn ln_cdf_matches_direct_and_tail() {
        for &x in &[-29.0, -10.0, -1.0, 0.0, 3.0] {
            assert!((ln_cdf(x) - cdf(x).ln()).abs() < 1e-10);
        }
        // continuity across the branch switch
        assert!((ln_cdf(-30.0 - 1e-9) - cdf(-30.0).ln()).abs() < 1e-6);
        assert!(ln_cdf(-300.0).is_finite());
    }
}
