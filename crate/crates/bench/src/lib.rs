//! Fixtures shared by the solver benchmarks.

use ddlearn_core::market::AnnualInputs;
use ddlearn_core::MarketParams;

/// The three-asset, 24-date market.
pub fn table2() -> MarketParams {
    AnnualInputs::table2().to_params().expect("valid preset")
}

/// A single-asset market small enough to solve inside a benchmark loop.
pub fn single_asset(n_steps: usize) -> MarketParams {
    AnnualInputs {
        horizon: 1.0,
        n_steps,
        p: 0.8,
        q: 0.7,
        drift_mean: vec![0.12],
        drift_cov: vec![vec![0.01]],
        noise_vol: vec![0.22],
        noise_corr: vec![vec![1.0]],
        x0: 1.0,
    }
    .to_params()
    .expect("valid instance")
}

#[cfg(test)]
mod tests {
    #[test]
    fn fixtures_validate() {
        assert_eq!(super::table2().d, 3);
        assert_eq!(super::single_asset(4).n_steps, 4);
    }
}
