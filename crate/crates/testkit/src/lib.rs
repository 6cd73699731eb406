//! Independent numerical oracles for the test suites.
//!
//! Everything in here is deliberately implemented without touching the main
//! crate: plain slices, naive dense linear algebra, a derivative-free
//! optimizer. Tests compare the production code against these routes, so the
//! oracles must not share algorithms with the code under test.

pub mod dense;
pub mod optimize;
pub mod stats;

pub use dense::{determinant, invert};
pub use optimize::{multi_start_nelder_mead, nelder_mead, NelderMeadResult};
pub use stats::{
    ar1_series, ks_critical, ks_statistic, mean, median_permutation_pvalue, normal_cdf,
    normal_logpdf, sample_covariance, sorted_quantile, variance,
};
