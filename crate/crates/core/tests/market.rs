use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use std::sync::Arc;

use crra_core::market::{simulate_paths, ConstantCoefficients, MarketModel, MarketPoint, TimeGrid};
use crra_core::Error;

fn gaussian_matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, rows * cols).prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

fn well_conditioned_market() -> impl Strategy<Value = (DVector<f64>, DMatrix<f64>)> {
    (1usize..=3, 0usize..=2)
        .prop_flat_map(|(n, extra)| {
            let m = n + extra;
            (prop::collection::vec(-2.0..2.0f64, n), gaussian_matrix(n, m))
        })
        .prop_map(|(mu, noise)| {
            let n = mu.len();
            let mut sigma = noise * 0.3;
            for k in 0..n {
                sigma[(k, k)] += 1.0;
            }
            (DVector::from_vec(mu), sigma)
        })
}

proptest! {
    #[test]
    fn merton_identities((mu, sigma) in well_conditioned_market()) {
        let point = MarketPoint::new(mu.clone(), sigma.clone(), 1e12).unwrap();
        let zm = point.merton_proportion();
        let residual = (&sigma * sigma.transpose() * zm - &mu).norm();
        prop_assert!(residual <= 1e-10 * (1.0 + mu.norm()));
        let theta = point.market_price_of_risk();
        let t2 = theta.norm_squared();
        prop_assert!((zm.dot(&mu) - t2).abs() <= 1e-10 * t2.max(1e-300) + 1e-15);
        let stats = point.stats(zm);
        prop_assert!((stats.vol - theta.norm()).abs() <= 1e-10 * (1.0 + theta.norm()));
    }

    #[test]
    fn portfolio_volatility_ignores_column_signs((mu, sigma) in well_conditioned_market(), zeta in prop::collection::vec(-3.0..3.0f64, 3)) {
        let n = mu.len();
        let zeta = DVector::from_iterator(n, zeta.into_iter().take(n));
        let mut flipped = sigma.clone();
        flipped.column_mut(0).neg_mut();
        let a = MarketPoint::new(mu.clone(), sigma, 1e12).unwrap().stats(&zeta);
        let b = MarketPoint::new(mu, flipped, 1e12).unwrap().stats(&zeta);
        prop_assert!(a.vol >= 0.0);
        prop_assert!((a.vol - b.vol).abs() < 1e-12 * (1.0 + a.vol));
        prop_assert_eq!(a.ret, b.ret);
    }

    #[test]
    fn wealth_stays_positive(seed in 0u64..1000, level in -20.0..20.0f64) {
        let model = MarketModel::constant(0.02, 0.5, 1.5).unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let paths = simulate_paths(grid, 1, 4, seed).unwrap();
        let strategy = vec![DVector::from_element(1, level); 20];
        for j in 0..4 {
            let x = model.wealth_path(&paths, j, &strategy, 1.0).unwrap();
            prop_assert!(x.iter().all(|&v| v > 0.0));
        }
    }
}

#[test]
fn two_dimensional_examples() {
    let mu = DVector::from_vec(vec![1.0, 2.0]);
    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
    let point = MarketPoint::new(mu, sigma, 1e12).unwrap();
    assert!((point.merton_proportion() - DVector::from_vec(vec![1.0, 0.5])).norm() < 1e-14);
    assert!((point.market_price_of_risk() - DVector::from_vec(vec![1.0, 1.0])).norm() < 1e-14);
    let stats = point.stats(point.merton_proportion());
    assert!((stats.ret - 2.0).abs() < 1e-14 && (stats.vol - 2f64.sqrt()).abs() < 1e-14);
}

#[test]
fn increments_have_step_variance() {
    // one increment per seed over 10⁵ seeds
    let grid = TimeGrid::new(0.5, 1).unwrap();
    let n = 100_000;
    let draws: Vec<f64> = (0..n).map(|s| simulate_paths(grid, 1, 1, s).unwrap().increment(0, 0)[0]).collect();
    let var = draws.iter().map(|x| x * x).sum::<f64>() / n as f64;
    // sd of the sample variance is Δt·√(2/n)
    assert!((var - 0.5).abs() < 3.0 * 0.5 * (2.0 / n as f64).sqrt());
}

#[test]
fn paths_start_at_zero_and_repeat() {
    let grid = TimeGrid::new(1.0, 7).unwrap();
    let a = simulate_paths(grid, 2, 50, 11).unwrap();
    let b = simulate_paths(grid, 2, 50, 11).unwrap();
    assert_eq!(a, b);
    assert!((0..50).all(|j| a.state(j, 0) == [0.0, 0.0]));
    assert_ne!(a, simulate_paths(grid, 2, 50, 12).unwrap());
}

#[test]
fn log_wealth_mean_matches_exponent() {
    let (r, mu, s, z) = (0.01, 0.3, 0.4, 1.2);
    let model = MarketModel::constant(r, mu, s).unwrap();
    let grid = TimeGrid::new(1.0, 4).unwrap();
    let n = 100_000;
    let paths = simulate_paths(grid, 1, n, 5).unwrap();
    let strategy = vec![DVector::from_element(1, z); 4];
    let logs: Vec<f64> = (0..n).map(|j| model.wealth_path(&paths, j, &strategy, 2.0).unwrap()[4].ln()).collect();
    let mean = logs.iter().sum::<f64>() / n as f64;
    let sd = (logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let expect = 2f64.ln() + (r + z * mu - 0.5 * z * z * s * s);
    assert!((mean - expect).abs() < 3.0 * sd / (n as f64).sqrt());
}

#[test]
fn rank_deficient_volatility_rejected() {
    let coeffs = ConstantCoefficients::new(
        DVector::from_vec(vec![0.1, 0.2]),
        DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0 + 1e-14]),
    )
    .unwrap();
    let model = MarketModel::new(0.0, Arc::new(coeffs)).unwrap();
    assert!(matches!(model.merton_proportion(0.0, &[0.0, 0.0]), Err(Error::SingularCovariance { .. })));
}
