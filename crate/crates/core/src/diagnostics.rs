//! Chain diagnostics: running quantiles, acceptance rates, effective
//! sample sizes, and replicate comparisons against a reference chain.
//!
//! Quantiles use the inverted-CDF convention throughout: the order-p
//! quantile of n sorted values is the element at rank `ceil(n p)`,
//! clamped to the valid range. The estimate is therefore always an
//! observed value and commutes with monotone coordinate transforms.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::samplers::Chain;

/// Orders tracked by default: the decile band around the median.
pub const DEFAULT_QUANTILE_ORDERS: [f64; 3] = [0.1, 0.5, 0.9];

/// Per-iteration quantile estimates for every tracked order and latent
/// coordinate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantileTrace {
    pub orders: Vec<f64>,
    /// States before this index are excluded from every estimate.
    pub burn_in: usize,
    /// `values[k][o][l]`: order `orders[o]` quantile of coordinate `l`
    /// over states `burn_in ..= burn_in + k`.
    pub values: Vec<Vec<Vec<f64>>>,
}

impl QuantileTrace {
    /// Estimates over the full post-burn-in chain.
    pub fn final_values(&self) -> &Vec<Vec<f64>> {
        self.values.last().expect("trace is never empty")
    }

    /// Absolute iteration index of entry `k`.
    pub fn iteration(&self, k: usize) -> usize {
        self.burn_in + k
    }
}

/// Rank-based quantile of an ascending slice.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let rank = ((n as f64 * p).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Track quantiles of every coordinate as the chain grows past
/// `burn_in`. Entry `k` summarizes the first `k + 1` retained states, so
/// the trace shows estimates stabilizing in real time.
pub fn running_quantiles(chain: &Chain, orders: &[f64], burn_in: usize) -> Result<QuantileTrace> {
    if orders.is_empty() {
        return Err(Error::Validation("at least one quantile order".into()));
    }
    if orders.iter().any(|p| !(p.is_finite() && *p > 0.0 && *p < 1.0)) {
        return Err(Error::Validation(
            "quantile orders must lie strictly between 0 and 1".into(),
        ));
    }
    if burn_in >= chain.len() {
        return Err(Error::Validation(format!(
            "burn-in {burn_in} consumes the whole chain of length {}",
            chain.len()
        )));
    }
    let p_dim = chain.dim();
    let n_kept = chain.len() - burn_in;
    let mut sorted: Vec<Vec<f64>> = vec![Vec::with_capacity(n_kept); p_dim];
    let mut values = Vec::with_capacity(n_kept);
    for state in &chain.states[burn_in..] {
        for (l, column) in sorted.iter_mut().enumerate() {
            let x = state.as_slice()[l];
            let at = column.partition_point(|v| *v < x);
            column.insert(at, x);
        }
        let snapshot: Vec<Vec<f64>> = orders
            .iter()
            .map(|p| (0..p_dim).map(|l| quantile_sorted(&sorted[l], *p)).collect())
            .collect();
        values.push(snapshot);
    }
    Ok(QuantileTrace {
        orders: orders.to_vec(),
        burn_in,
        values,
    })
}

/// Fraction of post-initial iterations that moved.
pub fn acceptance_rate(chain: &Chain) -> Result<f64> {
    let n_steps = chain.len().saturating_sub(1);
    if n_steps == 0 {
        return Err(Error::Validation(
            "acceptance rate needs at least one iteration".into(),
        ));
    }
    let n_accepted = chain.accepted[1..].iter().filter(|a| **a).count();
    Ok(n_accepted as f64 / n_steps as f64)
}

/// Five-number summary of one coordinate of the reference chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoordinateSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Replicate states at fixed iteration thresholds next to the reference
/// distribution they should settle into.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub thresholds: Vec<usize>,
    /// `samples[t][r][l]`: coordinate `l` of replicate `r` at iteration
    /// `thresholds[t]`.
    pub samples: Vec<Vec<Vec<f64>>>,
    /// Per-coordinate summary of the reference chain after its burn-in.
    pub reference: Vec<CoordinateSummary>,
}

/// Collect replicate states at the given iteration thresholds and
/// summarize the reference chain for comparison.
pub fn replicate_summary(
    replicates: &[Chain],
    thresholds: &[usize],
    reference: &Chain,
    reference_burn_in: usize,
) -> Result<ReplicateSummary> {
    if replicates.is_empty() {
        return Err(Error::Validation("at least one replicate chain".into()));
    }
    if thresholds.is_empty() || thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation(
            "thresholds must be strictly increasing and nonempty".into(),
        ));
    }
    let p_dim = replicates[0].dim();
    let shortest = replicates.iter().map(Chain::len).min().unwrap_or(0);
    let max_threshold = *thresholds.last().expect("nonempty");
    if max_threshold >= shortest {
        return Err(Error::Validation(format!(
            "threshold {max_threshold} exceeds the shortest replicate of length {shortest}"
        )));
    }
    if replicates.iter().any(|c| c.dim() != p_dim) || reference.dim() != p_dim {
        return Err(Error::DimensionMismatch {
            context: "replicate and reference dimensions",
            expected: p_dim,
            got: reference.dim(),
        });
    }
    if reference_burn_in >= reference.len() {
        return Err(Error::Validation(format!(
            "reference burn-in {reference_burn_in} consumes the reference of length {}",
            reference.len()
        )));
    }

    let samples: Vec<Vec<Vec<f64>>> = thresholds
        .iter()
        .map(|t| {
            replicates
                .iter()
                .map(|c| c.states[*t].as_slice().to_vec())
                .collect()
        })
        .collect();

    Ok(ReplicateSummary {
        thresholds: thresholds.to_vec(),
        samples,
        reference: coordinate_summaries(reference, reference_burn_in)?,
    })
}

/// Five-number summary of every coordinate over the post-burn-in states.
pub fn coordinate_summaries(chain: &Chain, burn_in: usize) -> Result<Vec<CoordinateSummary>> {
    if burn_in >= chain.len() {
        return Err(Error::Validation(format!(
            "burn-in {burn_in} consumes the whole chain of length {}",
            chain.len()
        )));
    }
    Ok((0..chain.dim())
        .map(|l| {
            let mut xs: Vec<f64> = chain.states[burn_in..]
                .iter()
                .map(|s| s.as_slice()[l])
                .collect();
            xs.sort_by(|a, b| a.partial_cmp(b).expect("latent coordinates are finite"));
            CoordinateSummary {
                min: xs[0],
                q1: quantile_sorted(&xs, 0.25),
                median: quantile_sorted(&xs, 0.5),
                q3: quantile_sorted(&xs, 0.75),
                max: xs[xs.len() - 1],
            }
        })
        .collect())
}

/// Largest autocovariance lag the estimator will scan. Chains whose
/// correlation persists past this are effectively unmixed and already
/// report a tiny ESS.
const ESS_MAX_LAG: usize = 10_000;

fn ess_one(xs: &[f64]) -> f64 {
    let n = xs.len();
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let centered: Vec<f64> = xs.iter().map(|x| x - mean).collect();
    let c0 = centered.iter().map(|d| d * d).sum::<f64>() / nf;
    if c0 == 0.0 {
        // A constant coordinate carries no autocorrelation to correct
        // for; by convention every draw counts.
        return nf;
    }
    let autocov = |t: usize| -> f64 {
        centered[..n - t]
            .iter()
            .zip(&centered[t..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / nf
    };
    // Initial positive sequence: accumulate adjacent-lag pairs while
    // their sum stays positive, which is where the true autocorrelation
    // ends and estimator noise begins.
    let max_lag = ESS_MAX_LAG.min(n.saturating_sub(2));
    let mut acc = 0.0;
    let mut t = 1;
    while t + 1 <= max_lag {
        let pair = autocov(t) + autocov(t + 1);
        if pair <= 0.0 {
            break;
        }
        acc += pair;
        t += 2;
    }
    let tau = 1.0 + 2.0 * acc / c0;
    (nf / tau).clamp(1.0, nf)
}

/// Effective sample size per coordinate over the post-burn-in states.
pub fn ess(chain: &Chain, burn_in: usize) -> Result<Vec<f64>> {
    if burn_in >= chain.len() {
        return Err(Error::Validation(format!(
            "burn-in {burn_in} consumes the whole chain of length {}",
            chain.len()
        )));
    }
    let n = chain.len() - burn_in;
    if n < 10 {
        return Err(Error::Validation(format!(
            "effective sample size needs at least 10 states, got {n}"
        )));
    }
    Ok((0..chain.dim())
        .map(|l| {
            let xs: Vec<f64> = chain.states[burn_in..]
                .iter()
                .map(|s| s.as_slice()[l])
                .collect();
            ess_one(&xs)
        })
        .collect())
}

/// Serialize a quantile trace in long form: one row per (iteration,
/// coordinate, order) triple.
pub fn write_quantile_csv<W: Write>(
    trace: &QuantileTrace,
    coordinate_labels: &[String],
    out: &mut W,
) -> Result<()> {
    let p_dim = trace.values.first().map_or(0, |v| v[0].len());
    if coordinate_labels.len() != p_dim {
        return Err(Error::DimensionMismatch {
            context: "coordinate labels vs trace",
            expected: p_dim,
            got: coordinate_labels.len(),
        });
    }
    writeln!(out, "iteration,coordinate,order,quantile")?;
    for (k, snapshot) in trace.values.iter().enumerate() {
        for (o, row) in snapshot.iter().enumerate() {
            for (l, value) in row.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{}",
                    trace.iteration(k),
                    coordinate_labels[l],
                    trace.orders[o],
                    value
                )?;
            }
        }
    }
    Ok(())
}
