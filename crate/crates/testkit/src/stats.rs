//! Statistical helpers for the test suites: KS comparisons, moments,
//! sort-based quantiles, AR(1) series and a permutation test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (denominator n-1).
pub fn variance(xs: &[f64]) -> f64 {
    assert!(xs.len() > 1);
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Unbiased sample covariance matrix of row-observations.
pub fn sample_covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    assert!(n > 1);
    let p = rows[0].len();
    let means: Vec<f64> = (0..p)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![vec![0.0; p]; p];
    for r in rows {
        for i in 0..p {
            for j in 0..p {
                cov[i][j] += (r[i] - means[i]) * (r[j] - means[j]);
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    cov
}

/// Standard normal CDF evaluated at `(x - mu) / sigma`.
pub fn normal_cdf(x: f64, mu: f64, sigma: f64) -> f64 {
    Normal::new(mu, sigma).expect("sigma must be positive").cdf(x)
}

/// Log density of N(mu, sigma^2) at `x`.
pub fn normal_logpdf(x: f64, mu: f64, sigma: f64) -> f64 {
    Normal::new(mu, sigma).expect("sigma must be positive").ln_pdf(x)
}

/// Two-sided Kolmogorov-Smirnov statistic of `samples` against `cdf`.
///
/// Sorts a copy; ties are handled by comparing the CDF against both the
/// lower and upper empirical step at each point.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    assert!(!xs.is_empty());
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((f - hi).abs());
    }
    d
}

/// Asymptotic two-sided KS critical value `c(alpha) / sqrt(n)`.
///
/// Supports the two levels used in the suites. For autocorrelated chains
/// pass an effective sample size as `n`.
pub fn ks_critical(alpha: f64, n: f64) -> f64 {
    assert!(n > 0.0);
    let c = if (alpha - 0.01).abs() < 1e-12 {
        1.6276236307187292
    } else if (alpha - 0.05).abs() < 1e-12 {
        1.3581015157406195
    } else {
        (-(alpha / 2.0).ln() / 2.0).sqrt()
    };
    c / n.sqrt()
}

/// Lower empirical quantile (inverted CDF): the smallest sample value `x`
/// with `F_n(x) >= p`. For a sorted sample of size n this is the
/// `ceil(n*p)`-th order statistic.
pub fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    assert!((0.0..=1.0).contains(&p));
    let n = sorted.len();
    let k = (n as f64 * p).ceil() as usize;
    sorted[k.clamp(1, n) - 1]
}

/// Stationary AR(1) series with autocorrelation `rho` and unit marginal
/// variance, from a seeded generator.
pub fn ar1_series(n: usize, rho: f64, seed: u64) -> Vec<f64> {
    assert!(rho.abs() < 1.0);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let innovation = (1.0 - rho * rho).sqrt();
    let mut xs = Vec::with_capacity(n);
    let mut x: f64 = rng.sample(rand_distr::StandardNormal);
    for _ in 0..n {
        xs.push(x);
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        x = rho * x + innovation * z;
    }
    xs
}

/// Two-sided permutation p-value for the median of a group of size `r`
/// against the pooled sample the group is claimed to be exchangeable with.
///
/// Repeatedly draws `r` values from `pool` without replacement, records the
/// median, and returns the fraction of draws at least as extreme (relative
/// to the pooled median) as `observed_median`.
pub fn median_permutation_pvalue(
    pool: &[f64],
    r: usize,
    observed_median: f64,
    n_perm: usize,
    seed: u64,
) -> f64 {
    assert!(r >= 1 && r <= pool.len());
    let mut sorted_pool = pool.to_vec();
    sorted_pool.sort_by(f64::total_cmp);
    let pool_median = sorted_quantile(&sorted_pool, 0.5);
    let observed_dev = (observed_median - pool_median).abs();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    let mut at_least_as_extreme = 0usize;
    for _ in 0..n_perm {
        // Partial Fisher-Yates: the first r entries become the draw.
        for i in 0..r {
            let j = rng.gen_range(i..indices.len());
            indices.swap(i, j);
        }
        let mut draw: Vec<f64> = indices[..r].iter().map(|&i| pool[i]).collect();
        draw.sort_by(f64::total_cmp);
        let m = sorted_quantile(&draw, 0.5);
        if (m - pool_median).abs() >= observed_dev {
            at_least_as_extreme += 1;
        }
    }
    (at_least_as_extreme as f64 + 1.0) / (n_perm as f64 + 1.0)
}
