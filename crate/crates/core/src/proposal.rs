//! Posterior-adapted Gaussian proposals for independence sampling.
//!
//! Both constructions center the proposal at the individual MAP estimate
//! and differ only in the curvature matrix added to the prior precision:
//!
//! ```text
//! linearized:  Gamma = (J' J / sigma2          + Omega^-1)^-1
//! laplace:     Gamma = (clip(-H_loglik)        + Omega^-1)^-1
//! ```
//!
//! where `J` is the latent-space Jacobian of the predictions at the MAP
//! point and `H_loglik` the numerical Hessian of the log likelihood. The
//! linearized form needs no second derivatives and coincides with the
//! Laplace form whenever residuals vanish or the model is linear in the
//! latent coordinates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky_lower, cholesky_solve, clip_negative_eigenvalues, condition_estimate, solve_lower,
    symmetrize,
};
use crate::map::MapResult;
use crate::model::{IndividualRecord, LatentPoint, PopulationParams};
use crate::structural::{jacobian_phi, StructuralModel};

const LN_2PI: f64 = 1.8378770664093453;
/// Relative jitter ladder applied to near-singular matrices before
/// factorization fails outright.
const JITTER_START: f64 = 1e-10;
const JITTER_END: f64 = 1e-4;

/// Which curvature approximation produced a proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalKind {
    Linearized,
    Laplace,
}

/// Controls shared by the proposal constructors.
#[derive(Debug, Clone, Default)]
pub struct ProposalOptions {
    /// Accept a MAP result whose gradient certificate failed. Off by
    /// default because a proposal centered away from the mode degrades
    /// silently.
    pub allow_unconverged: bool,
}

/// A multivariate normal proposal with cached factorization.
#[derive(Debug, Clone)]
pub struct GaussianProposal {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    logdet: f64,
    kind: ProposalKind,
}

/// Serialization form of a proposal; covariance is stored row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProposalExport {
    pub kind: ProposalKind,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub logdet: f64,
}

impl GaussianProposal {
    /// Build a proposal from a mean and a symmetric positive definite
    /// covariance. Near-singular covariances are nudged by the jitter
    /// ladder; the stored covariance is the one actually factored, so the
    /// `chol * chol^T == cov` invariant holds exactly as written.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, kind: ProposalKind) -> Result<Self> {
        let p = mean.len();
        if cov.nrows() != p || cov.ncols() != p {
            return Err(Error::DimensionMismatch {
                context: "proposal covariance vs mean",
                expected: p,
                got: cov.nrows(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("proposal mean must be finite".into()));
        }
        let scale = cov.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for i in 0..p {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-8 * scale.max(1.0) {
                    return Err(Error::Validation(format!(
                        "proposal covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let cov = symmetrize(&cov);
        let (chol, cov_used) = chol_with_jitter(&cov)?;
        let logdet = 2.0 * (0..p).map(|i| chol[(i, i)].ln()).sum::<f64>();
        Ok(Self {
            mean,
            cov: cov_used,
            chol,
            logdet,
            kind,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower-triangular factor with `chol * chol^T == cov`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn kind(&self) -> ProposalKind {
        self.kind
    }

    /// Draw one point, consuming exactly `dim` standard normal variates
    /// in coordinate order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LatentPoint> {
        LatentPoint::from_dvector(self.sample_vector(rng))
    }

    /// Raw draw without the finiteness guarantee of [`LatentPoint`];
    /// samplers check and reject non-finite excursions themselves.
    pub fn sample_vector<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        &self.mean + &self.chol * z
    }

    /// Log density at `phi`.
    ///
    /// Panics on dimension mismatch; the proposal and the chain state are
    /// built from the same population parameters, so a mismatch is a
    /// construction bug rather than a runtime condition.
    pub fn logpdf(&self, phi: &LatentPoint) -> f64 {
        assert_eq!(phi.dim(), self.dim(), "proposal and point dimension");
        let centered = phi.coords() - &self.mean;
        let w = solve_lower(&self.chol, &centered);
        -0.5 * (self.dim() as f64 * LN_2PI + self.logdet + w.dot(&w))
    }

    pub fn export(&self) -> ProposalExport {
        ProposalExport {
            kind: self.kind,
            mean: self.mean.iter().copied().collect(),
            cov: (0..self.dim())
                .map(|i| (0..self.dim()).map(|j| self.cov[(i, j)]).collect())
                .collect(),
            logdet: self.logdet,
        }
    }

    /// Rebuild a proposal from its export form, refactoring the
    /// covariance.
    pub fn from_export(export: &ProposalExport) -> Result<Self> {
        let p = export.mean.len();
        if export.cov.len() != p || export.cov.iter().any(|row| row.len() != p) {
            return Err(Error::DimensionMismatch {
                context: "exported covariance vs mean",
                expected: p,
                got: export.cov.len(),
            });
        }
        let cov = DMatrix::from_fn(p, p, |i, j| export.cov[i][j]);
        Self::new(DVector::from_vec(export.mean.clone()), cov, export.kind)
    }
}

/// Monte Carlo estimate of how far the expected log-likelihood curvature
/// sits from its zero-residual limit, relative to that limit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfoGapReport {
    /// Relative Frobenius gap between the averaged simulated curvature
    /// and `J' J / sigma2`.
    pub gap: f64,
    /// Monte Carlo standard error of the gap, propagated entrywise; NaN
    /// when fewer than two simulations were run.
    pub std_error: f64,
    pub n_sims: usize,
}

/// Factor a symmetric matrix, escalating a diagonal jitter from
/// `1e-10 * trace / p` tenfold up to `1e-4 * trace / p` before giving up
/// with the estimated condition number. Returns the factor together with
/// the matrix actually factored.
fn chol_with_jitter(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if let Ok(chol) = cholesky_lower(a) {
        return Ok((chol, a.clone()));
    }
    let p = a.nrows();
    let base = a.trace().abs() / p as f64;
    let base = if base > 0.0 && base.is_finite() { base } else { 1.0 };
    let mut rel = JITTER_START;
    while rel <= JITTER_END * (1.0 + 1e-12) {
        let jittered = a + DMatrix::<f64>::identity(p, p) * (rel * base);
        if let Ok(chol) = cholesky_lower(&jittered) {
            return Ok((chol, jittered));
        }
        rel *= 10.0;
    }
    Err(Error::IllConditioned {
        condition: condition_estimate(a),
    })
}

fn check_converged(map: &MapResult, opts: &ProposalOptions) -> Result<()> {
    if map.converged || opts.allow_unconverged {
        Ok(())
    } else {
        Err(Error::UnconvergedMap {
            grad_norm: map.grad_norm,
            iterations: map.iterations,
        })
    }
}

/// Precision assembled from a curvature term plus the prior, inverted to
/// a covariance.
fn covariance_from_curvature(
    curvature: &DMatrix<f64>,
    theta: &PopulationParams,
) -> Result<DMatrix<f64>> {
    let precision = symmetrize(&(curvature + theta.omega_inv()?));
    let (chol, _) = chol_with_jitter(&precision)?;
    let p = precision.nrows();
    let mut cov = DMatrix::<f64>::zeros(p, p);
    let identity = DMatrix::<f64>::identity(p, p);
    for j in 0..p {
        let col = cholesky_solve(&chol, &identity.column(j).into_owned());
        cov.set_column(j, &col);
    }
    Ok(symmetrize(&cov))
}

/// Proposal from the model linearized at the MAP point.
pub fn linearized_proposal(
    record: &IndividualRecord,
    theta: &PopulationParams,
    model: &dyn StructuralModel,
    map: &MapResult,
    opts: &ProposalOptions,
) -> Result<GaussianProposal> {
    check_converged(map, opts)?;
    let sigma2 = theta.sigma2();
    if !(sigma2 > 0.0) {
        return Err(Error::Validation(
            "linearized proposal requires sigma2 > 0".into(),
        ));
    }
    let jac = jacobian_phi(model, record.times(), &map.phi_hat, theta, record.dose())?;
    let curvature = jac.jac.transpose() * &jac.jac / sigma2;
    let cov = covariance_from_curvature(&curvature, theta)?;
    GaussianProposal::new(map.phi_hat.coords().clone(), cov, ProposalKind::Linearized)
}

/// Step for differencing the likelihood gradient along coordinate `l`.
fn hessian_step(phi: &LatentPoint, l: usize) -> f64 {
    f64::EPSILON.powf(1.0 / 3.0) * phi.as_slice()[l].abs().max(1.0)
}

/// Gradient of the log likelihood alone (no prior term) at `phi`.
fn loglik_gradient(
    record: &IndividualRecord,
    phi: &LatentPoint,
    theta: &PopulationParams,
    model: &dyn StructuralModel,
) -> Result<DVector<f64>> {
    let jac = jacobian_phi(model, record.times(), phi, theta, record.dose())?;
    let preds = DVector::from_vec(jac.values.clone());
    let ys = DVector::from_iterator(record.n_obs(), record.observations().iter().copied());
    Ok(jac.jac.transpose() * (ys - preds) / theta.sigma2())
}

/// Numerical log-likelihood Hessian: central differences of the analytic
/// gradient, symmetrized.
fn loglik_hessian(
    record: &IndividualRecord,
    phi: &LatentPoint,
    theta: &PopulationParams,
    model: &dyn StructuralModel,
) -> Result<DMatrix<f64>> {
    let p = phi.dim();
    let mut hessian = DMatrix::<f64>::zeros(p, p);
    for l in 0..p {
        let h = hessian_step(phi, l);
        let mut hi = phi.as_slice().to_vec();
        let mut lo = hi.clone();
        hi[l] += h;
        lo[l] -= h;
        let g_hi = loglik_gradient(record, &LatentPoint::new(hi)?, theta, model)?;
        let g_lo = loglik_gradient(record, &LatentPoint::new(lo)?, theta, model)?;
        let col = (g_hi - g_lo) / (2.0 * h);
        hessian.set_column(l, &col);
    }
    Ok(symmetrize(&hessian))
}

/// Proposal from the sign-corrected likelihood curvature at the MAP
/// point. Negative curvature directions are clipped to zero so the
/// combined precision stays at least as informative as the prior.
pub fn laplace_proposal(
    record: &IndividualRecord,
    theta: &PopulationParams,
    model: &dyn StructuralModel,
    map: &MapResult,
    opts: &ProposalOptions,
) -> Result<GaussianProposal> {
    check_converged(map, opts)?;
    if !(theta.sigma2() > 0.0) {
        return Err(Error::Validation(
            "laplace proposal requires sigma2 > 0".into(),
        ));
    }
    let hessian = loglik_hessian(record, &map.phi_hat, theta, model)?;
    let curvature = clip_negative_eigenvalues(&-hessian);
    let cov = covariance_from_curvature(&curvature, theta)?;
    GaussianProposal::new(map.phi_hat.coords().clone(), cov, ProposalKind::Laplace)
}

/// Estimate the relative gap between the simulation-averaged likelihood
/// curvature at `phi_hat` and its zero-residual limit `J' J / sigma2`.
///
/// Observations are redrawn from the model at `phi_hat` with the
/// population noise level; everything else (offset predictions and
/// Jacobians entering the differenced gradient) is precomputed once, so
/// each simulation costs two matrix-vector products per coordinate.
pub fn expected_info_gap(
    record: &IndividualRecord,
    theta: &PopulationParams,
    model: &dyn StructuralModel,
    phi_hat: &LatentPoint,
    n_sims: usize,
    seed: u64,
) -> Result<InfoGapReport> {
    if n_sims == 0 {
        return Err(Error::Validation("n_sims must be at least 1".into()));
    }
    let sigma2 = theta.sigma2();
    if !(sigma2 > 0.0) {
        return Err(Error::Validation("info gap requires sigma2 > 0".into()));
    }
    let p = phi_hat.dim();
    let n = record.n_obs();

    let center = jacobian_phi(model, record.times(), phi_hat, theta, record.dose())?;
    let f_center = DVector::from_vec(center.values.clone());
    let target = symmetrize(&(center.jac.transpose() * &center.jac / sigma2));
    let target_norm = target.norm();
    if !(target_norm > 0.0) {
        return Err(Error::Validation(
            "zero-curvature reference makes the relative gap undefined".into(),
        ));
    }

    // Offset geometry is independent of the simulated observations.
    struct Offset {
        h: f64,
        jac_hi: DMatrix<f64>,
        f_hi: DVector<f64>,
        jac_lo: DMatrix<f64>,
        f_lo: DVector<f64>,
    }
    let mut offsets = Vec::with_capacity(p);
    for l in 0..p {
        let h = hessian_step(phi_hat, l);
        let mut hi = phi_hat.as_slice().to_vec();
        let mut lo = hi.clone();
        hi[l] += h;
        lo[l] -= h;
        let jac_hi = jacobian_phi(model, record.times(), &LatentPoint::new(hi)?, theta, record.dose())?;
        let jac_lo = jacobian_phi(model, record.times(), &LatentPoint::new(lo)?, theta, record.dose())?;
        offsets.push(Offset {
            h,
            f_hi: DVector::from_vec(jac_hi.values.clone()),
            jac_hi: jac_hi.jac,
            f_lo: DVector::from_vec(jac_lo.values.clone()),
            jac_lo: jac_lo.jac,
        });
    }

    let sigma = sigma2.sqrt();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut sum = DMatrix::<f64>::zeros(p, p);
    let mut sum_sq = DMatrix::<f64>::zeros(p, p);
    for _ in 0..n_sims {
        let y = DVector::from_iterator(
            n,
            f_center
                .iter()
                .map(|f| f + sigma * rng.sample::<f64, _>(StandardNormal)),
        );
        let mut hessian = DMatrix::<f64>::zeros(p, p);
        for (l, off) in offsets.iter().enumerate() {
            let g_hi = off.jac_hi.transpose() * (&y - &off.f_hi) / sigma2;
            let g_lo = off.jac_lo.transpose() * (&y - &off.f_lo) / sigma2;
            hessian.set_column(l, &((g_hi - g_lo) / (2.0 * off.h)));
        }
        let curvature = -symmetrize(&hessian);
        sum += &curvature;
        sum_sq += curvature.component_mul(&curvature);
    }

    let mean = &sum / n_sims as f64;
    let gap = (&mean - &target).norm() / target_norm;
    let std_error = if n_sims >= 2 {
        let nf = n_sims as f64;
        // Entrywise variance of the mean, combined in quadrature to bound
        // the Frobenius-norm fluctuation.
        let var_sum: f64 = sum_sq
            .iter()
            .zip(sum.iter())
            .map(|(sq, s)| ((sq - s * s / nf) / (nf - 1.0)).max(0.0) / nf)
            .sum();
        var_sum.sqrt() / target_norm
    } else {
        f64::NAN
    };

    Ok(InfoGapReport {
        gap,
        std_error,
        n_sims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{find_map, MapOptions};
    use crate::model::{log_joint, log_prior, Transform};
    use crate::structural::{LinearModel, Pk1Oral};
    use approx::assert_relative_eq;

    fn conjugate() -> (IndividualRecord, PopulationParams, LinearModel) {
        let theta = PopulationParams::new(
            vec![1.3],
            DMatrix::from_element(1, 1, 0.25),
            0.5,
            vec![Transform::Identity],
        )
        .unwrap();
        let times: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let ys = vec![2.1, 1.7, 2.4, 1.9, 2.2, 2.0, 1.8, 2.3, 2.1, 1.95];
        (
            IndividualRecord::new("1", times, ys, 1.0).unwrap(),
            theta,
            LinearModel::constant(),
        )
    }

    fn pk_fixture(noise: &[f64]) -> (IndividualRecord, PopulationParams) {
        let theta = PopulationParams::with_diagonal_sd(
            vec![1.0, 8.0, 0.01],
            &[0.5, 0.2, 0.3],
            0.5,
            vec![Transform::Log; 3],
        )
        .unwrap();
        let times = vec![0.5, 1.0, 2.0, 4.0, 8.0, 12.0, 24.0, 48.0, 72.0, 96.0, 120.0];
        let psi = [1.2, 7.6, 0.011];
        let f = Pk1Oral.predict(&times, &psi, 105.0).unwrap();
        let ys: Vec<f64> = f
            .iter()
            .enumerate()
            .map(|(j, v)| v + noise.get(j).copied().unwrap_or(0.0))
            .collect();
        (IndividualRecord::new("w", times, ys, 105.0).unwrap(), theta)
    }

    fn map_of(record: &IndividualRecord, theta: &PopulationParams, model: &dyn StructuralModel) -> MapResult {
        find_map(record, theta, model, None, &MapOptions::default()).unwrap()
    }

    // Quadratic objectives support a much tighter gradient target than the
    // noisy nonlinear fixtures, and the posterior-identity test needs it.
    fn sharp_map_of(record: &IndividualRecord, theta: &PopulationParams, model: &dyn StructuralModel) -> MapResult {
        let opts = MapOptions {
            gtol: 1e-10,
            ..MapOptions::default()
        };
        find_map(record, theta, model, None, &opts).unwrap()
    }

    #[test]
    fn conjugate_variance_matches_closed_form() {
        let (record, theta, model) = conjugate();
        let map = map_of(&record, &theta, &model);
        let prop = linearized_proposal(&record, &theta, &model, &map, &Default::default()).unwrap();
        let expected_var = 1.0 / (10.0 / 0.5 + 1.0 / 0.25);
        assert_relative_eq!(prop.cov()[(0, 0)], expected_var, max_relative = 1e-12);
        assert_relative_eq!(prop.mean()[0], map.phi_hat.as_slice()[0], max_relative = 1e-15);
    }

    #[test]
    fn flat_model_covariance_is_the_prior() {
        // A model with zero Jacobian contributes no curvature, so the
        // proposal collapses onto the prior.
        #[derive(Debug)]
        struct Flat;
        impl StructuralModel for Flat {
            fn name(&self) -> &str {
                "flat"
            }
            fn param_names(&self) -> Vec<String> {
                vec!["a".into(), "b".into()]
            }
            fn domain(&self) -> Vec<(f64, f64)> {
                vec![(f64::NEG_INFINITY, f64::INFINITY); 2]
            }
            fn predict(&self, times: &[f64], _psi: &[f64], _dose: f64) -> crate::error::Result<Vec<f64>> {
                Ok(vec![3.0; times.len()])
            }
        }
        let theta = PopulationParams::new(
            vec![0.4, -0.2],
            DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
            0.8,
            vec![Transform::Identity; 2],
        )
        .unwrap();
        let record = IndividualRecord::new("1", vec![1.0, 2.0], vec![3.1, 2.9], 1.0).unwrap();
        let map = map_of(&record, &theta, &Flat);
        let prop = linearized_proposal(&record, &theta, &Flat, &map, &Default::default()).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(
                    prop.cov()[(i, j)],
                    theta.omega()[(i, j)],
                    max_relative = 1e-10
                );
            }
        }
        // With a flat likelihood the proposal density differs from the
        // prior density by the constant likelihood only.
        for point in [vec![0.4, -0.2], vec![1.0, 0.5], vec![-0.7, 0.1]] {
            let phi = LatentPoint::new(point).unwrap();
            assert_relative_eq!(
                prop.logpdf(&phi),
                log_prior(&phi, &theta).unwrap(),
                max_relative = 1e-9,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn covariance_matches_dense_inverse_oracle() {
        let (record, theta) = pk_fixture(&[0.2, -0.3, 0.25, -0.1, 0.05, 0.3, -0.2, 0.1, -0.15, 0.2, -0.05]);
        let map = map_of(&record, &theta, &Pk1Oral);
        let prop = linearized_proposal(&record, &theta, &Pk1Oral, &map, &Default::default()).unwrap();

        let jac = jacobian_phi(&Pk1Oral, record.times(), &map.phi_hat, &theta, record.dose()).unwrap();
        let jtj = jac.jac.transpose() * &jac.jac / theta.sigma2();
        let omega_rows: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3).map(|j| theta.omega()[(i, j)]).collect())
            .collect();
        let omega_inv = nlme_testkit::invert(&omega_rows).unwrap();
        let precision: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3).map(|j| jtj[(i, j)] + omega_inv[i][j]).collect())
            .collect();
        let oracle_cov = nlme_testkit::invert(&precision).unwrap();

        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                num += (prop.cov()[(i, j)] - oracle_cov[i][j]).powi(2);
                den += oracle_cov[i][j].powi(2);
            }
        }
        assert!((num / den).sqrt() < 1e-8);
    }

    #[test]
    fn laplace_equals_linearized_for_latent_linear_model() {
        // Identity transforms keep a polynomial model linear in phi, so
        // the likelihood Hessian is exactly -J'J/sigma2.
        let theta = PopulationParams::new(
            vec![1.0, 0.5],
            DMatrix::from_row_slice(2, 2, &[0.4, 0.05, 0.05, 0.2]),
            0.3,
            vec![Transform::Identity; 2],
        )
        .unwrap();
        let model = LinearModel::new(2);
        let times = vec![0.0, 1.0, 2.0, 3.0];
        let ys = vec![1.1, 1.4, 2.2, 2.4];
        let record = IndividualRecord::new("1", times, ys, 1.0).unwrap();
        let map = map_of(&record, &theta, &model);
        let lin = linearized_proposal(&record, &theta, &model, &map, &Default::default()).unwrap();
        let lap = laplace_proposal(&record, &theta, &model, &map, &Default::default()).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(lin.cov()[(i, j)], lap.cov()[(i, j)], max_relative = 1e-10);
            }
        }
        assert_eq!(lin.mean(), lap.mean());
    }

    #[test]
    fn zero_residual_pk_brings_both_constructions_together() {
        // Observations sit exactly on the curve at the prior mode, so the
        // MAP point is the mode and residuals vanish there; the curvature
        // correction separating the two constructions drops out.
        let theta = PopulationParams::with_diagonal_sd(
            vec![1.0, 8.0, 0.01],
            &[0.5, 0.2, 0.3],
            0.5,
            vec![Transform::Log; 3],
        )
        .unwrap();
        let times = vec![0.5, 1.0, 2.0, 4.0, 8.0, 12.0, 24.0, 48.0, 72.0, 96.0, 120.0];
        let psi_mode = theta.psi_from_phi(&theta.prior_mode());
        let ys = Pk1Oral.predict(&times, &psi_mode, 105.0).unwrap();
        let record = IndividualRecord::new("w", times, ys, 105.0).unwrap();
        let map = map_of(&record, &theta, &Pk1Oral);
        assert!(map.grad_norm <= 1e-10);
        let lin = linearized_proposal(&record, &theta, &Pk1Oral, &map, &Default::default()).unwrap();
        let lap = laplace_proposal(&record, &theta, &Pk1Oral, &map, &Default::default()).unwrap();
        let diff = (lin.cov() - lap.cov()).norm() / lin.cov().norm();
        assert!(diff < 1e-6, "relative gap {diff}");
    }

    #[test]
    fn proposal_never_exceeds_prior_spread() {
        // Gamma = (curvature + Omega^-1)^-1 with curvature PSD, so for any
        // direction v: v' Gamma v <= v' Omega v.
        let (record, theta) = pk_fixture(&[0.3, -0.4, 0.2, 0.1, -0.2, 0.15, 0.05, -0.1, 0.2, -0.3, 0.1]);
        let map = map_of(&record, &theta, &Pk1Oral);
        for prop in [
            linearized_proposal(&record, &theta, &Pk1Oral, &map, &Default::default()).unwrap(),
            laplace_proposal(&record, &theta, &Pk1Oral, &map, &Default::default()).unwrap(),
        ] {
            let dirs = [
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![1.0, 1.0, 1.0],
                vec![1.0, -2.0, 0.5],
                vec![-0.3, 0.8, -1.4],
            ];
            for d in dirs {
                let v = DVector::from_vec(d);
                let through_prop = (v.transpose() * prop.cov() * &v)[(0, 0)];
                let through_prior = (v.transpose() * theta.omega() * &v)[(0, 0)];
                assert!(through_prop <= through_prior * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn factor_reconstructs_covariance() {
        let (record, theta) = pk_fixture(&[0.1, 0.2, -0.1, 0.0, 0.3, -0.2, 0.1, 0.0, -0.1, 0.2, 0.1]);
        let map = map_of(&record, &theta, &Pk1Oral);
        let prop = linearized_proposal(&record, &theta, &Pk1Oral, &map, &Default::default()).unwrap();
        let rebuilt = prop.chol() * prop.chol().transpose();
        assert!((rebuilt - prop.cov()).amax() < 1e-10 * prop.cov().amax().max(1.0));
        let diag_logdet: f64 = (0..3).map(|i| prop.chol()[(i, i)].ln()).sum::<f64>() * 2.0;
        assert_relative_eq!(prop.logdet(), diag_logdet, max_relative = 1e-14);
        // Stored covariance is exactly symmetric.
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(prop.cov()[(i, j)], prop.cov()[(j, i)]);
            }
        }
    }

    #[test]
    fn logpdf_matches_direct_formula() {
        let (record, theta, model) = conjugate();
        let map = map_of(&record, &theta, &model);
        let prop = linearized_proposal(&record, &theta, &model, &map, &Default::default()).unwrap();
        let var = prop.cov()[(0, 0)];
        let mu = prop.mean()[0];
        for x in [mu, mu + 0.1, mu - 0.3, 0.0] {
            let phi = LatentPoint::new(vec![x]).unwrap();
            let direct = -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mu).powi(2) / var);
            assert_relative_eq!(prop.logpdf(&phi), direct, max_relative = 1e-12);
        }
    }

    #[test]
    fn linear_model_proposal_equals_posterior() {
        // For a latent-linear model the linearized proposal IS the
        // posterior: log q - log joint is constant in phi.
        let theta = PopulationParams::new(
            vec![1.0, 0.5],
            DMatrix::from_row_slice(2, 2, &[0.4, 0.05, 0.05, 0.2]),
            0.3,
            vec![Transform::Identity; 2],
        )
        .unwrap();
        let model = LinearModel::new(2);
        let record =
            IndividualRecord::new("1", vec![0.0, 1.0, 2.0, 3.0], vec![1.1, 1.4, 2.2, 2.4], 1.0)
                .unwrap();
        let map = sharp_map_of(&record, &theta, &model);
        let prop = linearized_proposal(&record, &theta, &model, &map, &Default::default()).unwrap();
        let mut gaps = Vec::new();
        for point in [
            vec![1.0, 0.5],
            vec![1.3, 0.2],
            vec![0.6, 0.9],
            vec![2.0, -0.5],
            vec![-0.4, 1.1],
        ] {
            let phi = LatentPoint::new(point).unwrap();
            gaps.push(prop.logpdf(&phi) - log_joint(&record, &phi, &theta, &model).unwrap());
        }
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / gaps.len() as f64;
        assert!(var < 1e-16, "variance of logq - logpost: {var}");
    }

    #[test]
    fn sampling_concentrates_at_the_mean_and_obeys_the_law_of_large_numbers() {
        let mean = DVector::from_vec(vec![0.7, -1.2]);
        let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.4]);
        let prop = GaussianProposal::new(mean.clone(), cov.clone(), ProposalKind::Linearized).unwrap();

        // Tiny covariance pins draws to the mean.
        let tiny = GaussianProposal::new(
            mean.clone(),
            DMatrix::from_diagonal_element(2, 2, 1e-20),
            ProposalKind::Linearized,
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let draw = tiny.sample(&mut rng).unwrap();
        assert!((draw.coords() - &mean).amax() < 1e-8);

        // Empirical moments converge at the Monte Carlo rate.
        let n = 200_000usize;
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut sum = DVector::zeros(2);
        let mut sum_outer = DMatrix::<f64>::zeros(2, 2);
        for _ in 0..n {
            let x = prop.sample_vector(&mut rng);
            sum += &x;
            sum_outer += &x * x.transpose();
        }
        let emp_mean = &sum / n as f64;
        let emp_cov = &sum_outer / n as f64 - &emp_mean * emp_mean.transpose();
        assert!((&emp_mean - &mean).amax() < 0.01);
        assert!((&emp_cov - &cov).amax() < 0.02);

        // Identical seeds reproduce identical draws.
        let mut r1 = ChaCha12Rng::seed_from_u64(42);
        let mut r2 = ChaCha12Rng::seed_from_u64(42);
        assert_eq!(prop.sample_vector(&mut r1), prop.sample_vector(&mut r2));
    }

    #[test]
    fn unconverged_map_is_refused_unless_overridden() {
        let (record, theta) = pk_fixture(&[0.3, -0.4, 0.2, 0.1, -0.2, 0.15, 0.05, -0.1, 0.2, -0.3, 0.1]);
        let init = LatentPoint::new(vec![1.5, 3.0, -6.0]).unwrap();
        let opts = MapOptions {
            max_iter: 1,
            ..MapOptions::default()
        };
        let map = find_map(&record, &theta, &Pk1Oral, Some(&init), &opts).unwrap();
        assert!(!map.converged);
        let refused = linearized_proposal(&record, &theta, &Pk1Oral, &map, &Default::default());
        assert!(matches!(refused, Err(Error::UnconvergedMap { .. })));
        let allowed = linearized_proposal(
            &record,
            &theta,
            &Pk1Oral,
            &map,
            &ProposalOptions {
                allow_unconverged: true,
            },
        );
        assert!(allowed.is_ok());
    }

    #[test]
    fn jitter_ladder_rescues_rank_deficient_covariances() {
        // Rank-one covariance: exact factorization fails, a small ridge
        // succeeds and is recorded in the stored covariance.
        let v = DVector::from_vec(vec![1.0, 2.0]);
        let cov = &v * v.transpose();
        let prop = GaussianProposal::new(
            DVector::zeros(2),
            cov.clone(),
            ProposalKind::Linearized,
        )
        .unwrap();
        assert!(prop.cov()[(0, 0)] > cov[(0, 0)]);
        let rebuilt = prop.chol() * prop.chol().transpose();
        assert!((rebuilt - prop.cov()).amax() < 1e-12);

        // A matrix the whole ladder cannot fix is reported with its
        // condition estimate.
        let hopeless = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -5.0]);
        let err = GaussianProposal::new(DVector::zeros(2), hopeless, ProposalKind::Laplace);
        assert!(matches!(err, Err(Error::IllConditioned { .. })));
    }

    #[test]
    fn export_round_trips() {
        let (record, theta) = pk_fixture(&[0.1, 0.2, -0.1, 0.0, 0.3, -0.2, 0.1, 0.0, -0.1, 0.2, 0.1]);
        let map = map_of(&record, &theta, &Pk1Oral);
        let prop = laplace_proposal(&record, &theta, &Pk1Oral, &map, &Default::default()).unwrap();
        let json = serde_json::to_string(&prop.export()).unwrap();
        let back: ProposalExport = serde_json::from_str(&json).unwrap();
        let rebuilt = GaussianProposal::from_export(&back).unwrap();
        assert_eq!(rebuilt.kind(), ProposalKind::Laplace);
        assert!((rebuilt.mean() - prop.mean()).amax() < 1e-15);
        assert!((rebuilt.cov() - prop.cov()).amax() < 1e-15);
        let phi = LatentPoint::new(vec![0.2, 2.0, -4.5]).unwrap();
        assert_relative_eq!(rebuilt.logpdf(&phi), prop.logpdf(&phi), max_relative = 1e-12);
    }

    #[test]
    fn info_gap_vanishes_for_latent_linear_models() {
        let theta = PopulationParams::new(
            vec![1.0, 0.5],
            DMatrix::from_row_slice(2, 2, &[0.4, 0.05, 0.05, 0.2]),
            0.3,
            vec![Transform::Identity; 2],
        )
        .unwrap();
        let model = LinearModel::new(2);
        let record =
            IndividualRecord::new("1", vec![0.0, 1.0, 2.0, 3.0], vec![1.1, 1.4, 2.2, 2.4], 1.0)
                .unwrap();
        let phi_hat = LatentPoint::new(vec![1.1, 0.4]).unwrap();
        let report = expected_info_gap(&record, &theta, &model, &phi_hat, 50, 3).unwrap();
        assert!(report.gap < 1e-10, "gap {}", report.gap);
    }

    #[test]
    fn info_gap_shrinks_with_more_simulations() {
        let (record, theta) = pk_fixture(&[0.2, -0.3, 0.25, -0.1, 0.05, 0.3, -0.2, 0.1, -0.15, 0.2, -0.05]);
        let map = map_of(&record, &theta, &Pk1Oral);

        // The curvature fluctuation around its mean scales like
        // 1/sqrt(n_sims); with the bias subtracted dominated by noise at
        // n=1, averaging 10^4 draws must shrink the measured gap.
        let mut small = Vec::new();
        let mut large = Vec::new();
        for seed in 0..8u64 {
            small.push(
                expected_info_gap(&record, &theta, &Pk1Oral, &map.phi_hat, 1, 100 + seed)
                    .unwrap()
                    .gap,
            );
            large.push(
                expected_info_gap(&record, &theta, &Pk1Oral, &map.phi_hat, 10_000, 200 + seed)
                    .unwrap()
                    .gap,
            );
        }
        let med = |xs: &mut Vec<f64>| {
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            xs[xs.len() / 2]
        };
        let med_small = med(&mut small);
        let med_large = med(&mut large);
        assert!(
            med_large < med_small / 3.0,
            "median gap at 1 sim {med_small}, at 1e4 sims {med_large}"
        );

        // At 10^4 simulations the residual gap is statistically
        // indistinguishable from zero at three standard errors.
        let report =
            expected_info_gap(&record, &theta, &Pk1Oral, &map.phi_hat, 10_000, 5).unwrap();
        assert!(report.std_error.is_finite());
        assert!(
            report.gap < 3.0 * report.std_error + 1e-9,
            "gap {} vs 3 se {}",
            report.gap,
            3.0 * report.std_error
        );

        // Identical seeds give identical reports.
        let again = expected_info_gap(&record, &theta, &Pk1Oral, &map.phi_hat, 10_000, 5).unwrap();
        assert_eq!(report.gap, again.gap);
        assert_eq!(report.std_error, again.std_error);
    }
}
