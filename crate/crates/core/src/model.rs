//! Population model, individual data and latent-space densities.
//!
//! An individual's parameter vector `psi` is tied to a latent vector `phi`
//! by a fixed per-coordinate transform: `phi_l = psi_l` (identity) or
//! `phi_l = ln psi_l` (log). The population prior is Gaussian in the latent
//! coordinates,
//!
//! ```text
//! phi ~ N(m(psi_pop), omega),    m = per-coordinate transform
//! ```
//!
//! and observations are Gaussian around the structural prediction,
//!
//! ```text
//! y | psi ~ N(f(t, psi, dose), sigma2 * I).
//! ```
//!
//! All densities in this crate are densities over `phi`. No change-of-
//! variable Jacobian is applied for log-transformed coordinates: the prior
//! is exactly Gaussian in `phi`, and Metropolis-Hastings ratios are
//! unaffected by the fixed reparameterization. The unit tests pin this
//! convention against the lognormal density of `psi` in one dimension.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::structural::{jacobian_phi, StructuralModel};

const NEG_INF: f64 = f64::NEG_INFINITY;

fn ln_2pi() -> f64 {
    (2.0 * std::f64::consts::PI).ln()
}

/// Per-coordinate latent transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    /// `phi = psi`
    Identity,
    /// `phi = ln psi`, so `psi = exp(phi)` is kept positive.
    Log,
}

impl Transform {
    /// Natural scale to latent scale for one coordinate.
    pub fn to_latent(self, psi: f64) -> f64 {
        match self {
            Transform::Identity => psi,
            Transform::Log => psi.ln(),
        }
    }

    /// Latent scale back to the natural scale; strictly increasing, so
    /// it maps latent quantiles to natural-scale quantiles.
    pub fn from_latent(self, phi: f64) -> f64 {
        match self {
            Transform::Identity => phi,
            Transform::Log => phi.exp(),
        }
    }

    /// `d psi / d phi`, the chain-rule factor for structural Jacobians.
    pub(crate) fn dpsi_dphi(self, psi: f64) -> f64 {
        match self {
            Transform::Identity => 1.0,
            Transform::Log => psi,
        }
    }
}

/// A finite point in latent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPoint {
    coords: DVector<f64>,
}

impl LatentPoint {
    /// Rejects any non-finite coordinate; infinities must never enter the
    /// density evaluations silently.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if let Some(i) = coords.iter().position(|x| !x.is_finite()) {
            return Err(Error::Validation(format!(
                "latent coordinate {i} is not finite: {}",
                coords[i]
            )));
        }
        Ok(Self {
            coords: DVector::from_vec(coords),
        })
    }

    pub(crate) fn from_dvector(coords: DVector<f64>) -> Result<Self> {
        if let Some(i) = coords.iter().position(|x| !x.is_finite()) {
            return Err(Error::Validation(format!(
                "latent coordinate {i} is not finite: {}",
                coords[i]
            )));
        }
        Ok(Self { coords })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.coords.as_slice()
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.coords
    }
}

/// Observations for one individual: sampling times, measured values and the
/// administered dose.
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualRecord {
    id: String,
    times: Vec<f64>,
    observations: Vec<f64>,
    dose: f64,
}

impl IndividualRecord {
    /// Validates that times are finite, nonnegative and strictly
    /// increasing, that observations align with times, and that the dose is
    /// positive.
    pub fn new(
        id: impl Into<String>,
        times: Vec<f64>,
        observations: Vec<f64>,
        dose: f64,
    ) -> Result<Self> {
        let id = id.into();
        if times.is_empty() {
            return Err(Error::Validation(format!(
                "individual {id}: at least one observation required"
            )));
        }
        if observations.len() != times.len() {
            return Err(Error::DimensionMismatch {
                context: "observations vs times",
                expected: times.len(),
                got: observations.len(),
            });
        }
        for (j, &t) in times.iter().enumerate() {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::Validation(format!(
                    "individual {id}: time {j} must be finite and nonnegative, got {t}"
                )));
            }
            if j > 0 && t <= times[j - 1] {
                return Err(Error::Validation(format!(
                    "individual {id}: times must be strictly increasing at index {j}"
                )));
            }
        }
        if let Some(j) = observations.iter().position(|y| !y.is_finite()) {
            return Err(Error::Validation(format!(
                "individual {id}: observation {j} is not finite"
            )));
        }
        if !dose.is_finite() || dose <= 0.0 {
            return Err(Error::Validation(format!(
                "individual {id}: dose must be positive, got {dose}"
            )));
        }
        Ok(Self {
            id,
            times,
            observations,
            dose,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    pub fn dose(&self) -> f64 {
        self.dose
    }

    pub fn n_obs(&self) -> usize {
        self.times.len()
    }
}

#[derive(Debug, Clone)]
struct PriorFactor {
    chol: DMatrix<f64>,
    inv: DMatrix<f64>,
    logdet: f64,
}

/// Population-level parameters: typical values, random-effect covariance,
/// residual variance and the latent transform per coordinate.
///
/// Construction validates shapes, finiteness, symmetry of `omega` and
/// positivity of `psi_pop` on log-transformed coordinates. Strict
/// positivity of `sigma2` and positive definiteness of `omega` are enforced
/// by the operations that need them (density evaluation), not here, so that
/// degenerate noiseless settings remain expressible for simulation.
#[derive(Debug, Clone)]
pub struct PopulationParams {
    psi_pop: DVector<f64>,
    omega: DMatrix<f64>,
    sigma2: f64,
    transforms: Vec<Transform>,
    prior: Option<PriorFactor>,
    prior_failure: Option<(usize, f64)>,
}

impl PopulationParams {
    pub fn new(
        psi_pop: Vec<f64>,
        omega: DMatrix<f64>,
        sigma2: f64,
        transforms: Vec<Transform>,
    ) -> Result<Self> {
        let p = psi_pop.len();
        if p == 0 {
            return Err(Error::Validation("psi_pop must be non-empty".into()));
        }
        if transforms.len() != p {
            return Err(Error::DimensionMismatch {
                context: "transforms vs psi_pop",
                expected: p,
                got: transforms.len(),
            });
        }
        if omega.nrows() != p || omega.ncols() != p {
            return Err(Error::DimensionMismatch {
                context: "omega vs psi_pop",
                expected: p,
                got: omega.nrows().max(omega.ncols()),
            });
        }
        if !sigma2.is_finite() || sigma2 < 0.0 {
            return Err(Error::Validation(format!(
                "sigma2 must be finite and nonnegative, got {sigma2}"
            )));
        }
        for (l, (&v, tr)) in psi_pop.iter().zip(&transforms).enumerate() {
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "psi_pop[{l}] is not finite"
                )));
            }
            if *tr == Transform::Log && v <= 0.0 {
                return Err(Error::Validation(format!(
                    "psi_pop[{l}] must be positive under the log transform, got {v}"
                )));
            }
        }
        let scale = omega.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        for i in 0..p {
            for j in 0..i {
                if !omega[(i, j)].is_finite()
                    || (omega[(i, j)] - omega[(j, i)]).abs() > 1e-10 * scale.max(1.0)
                {
                    return Err(Error::Validation(format!(
                        "omega must be symmetric; entries ({i},{j}) and ({j},{i}) disagree"
                    )));
                }
            }
            if !omega[(i, i)].is_finite() {
                return Err(Error::Validation(format!("omega[{i},{i}] is not finite")));
            }
        }
        let omega = linalg::symmetrize(&omega);

        let (prior, prior_failure) = match linalg::cholesky_lower(&omega) {
            Ok(chol) => {
                let logdet = linalg::cholesky_logdet(&chol);
                let inv = linalg::cholesky_inverse(&chol);
                (Some(PriorFactor { chol, inv, logdet }), None)
            }
            Err(Error::NotPositiveDefinite { pivot, value }) => (None, Some((pivot, value))),
            Err(e) => return Err(e),
        };

        Ok(Self {
            psi_pop: DVector::from_vec(psi_pop),
            omega,
            sigma2,
            transforms,
            prior,
            prior_failure,
        })
    }

    /// Diagonal random-effect covariance from per-coordinate standard
    /// deviations (the `omega_l` notation): variance `omega_sd[l]^2`.
    pub fn with_diagonal_sd(
        psi_pop: Vec<f64>,
        omega_sd: &[f64],
        sigma2: f64,
        transforms: Vec<Transform>,
    ) -> Result<Self> {
        if omega_sd.len() != psi_pop.len() {
            return Err(Error::DimensionMismatch {
                context: "omega_sd vs psi_pop",
                expected: psi_pop.len(),
                got: omega_sd.len(),
            });
        }
        let omega = DMatrix::from_diagonal(&DVector::from_fn(omega_sd.len(), |i, _| {
            omega_sd[i] * omega_sd[i]
        }));
        Self::new(psi_pop, omega, sigma2, transforms)
    }

    pub fn dim(&self) -> usize {
        self.psi_pop.len()
    }

    pub fn psi_pop(&self) -> &[f64] {
        self.psi_pop.as_slice()
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    /// Latent prior mean `m(psi_pop)`, which is also the prior mode.
    pub fn prior_mode(&self) -> LatentPoint {
        let coords = DVector::from_fn(self.dim(), |l, _| {
            self.transforms[l].to_latent(self.psi_pop[l])
        });
        LatentPoint { coords }
    }

    /// Map a latent point back to the natural parameter scale.
    pub fn psi_from_phi(&self, phi: &LatentPoint) -> Vec<f64> {
        phi.as_slice()
            .iter()
            .zip(&self.transforms)
            .map(|(&x, tr)| tr.from_latent(x))
            .collect()
    }

    /// Map natural parameters into latent coordinates. Log-transformed
    /// coordinates must be positive.
    pub fn phi_from_psi(&self, psi: &[f64]) -> Result<LatentPoint> {
        if psi.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "psi vs psi_pop",
                expected: self.dim(),
                got: psi.len(),
            });
        }
        for (l, (&v, tr)) in psi.iter().zip(&self.transforms).enumerate() {
            if *tr == Transform::Log && v <= 0.0 {
                return Err(Error::Validation(format!(
                    "psi[{l}] must be positive under the log transform, got {v}"
                )));
            }
        }
        LatentPoint::new(
            psi.iter()
                .zip(&self.transforms)
                .map(|(&v, tr)| tr.to_latent(v))
                .collect(),
        )
    }

    /// Chain-rule factors `d psi_l / d phi_l` at a latent point.
    pub(crate) fn dpsi_dphi(&self, psi: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.dim(), |l, _| self.transforms[l].dpsi_dphi(psi[l]))
    }

    fn prior_factor(&self) -> Result<&PriorFactor> {
        match (&self.prior, &self.prior_failure) {
            (Some(f), _) => Ok(f),
            (None, Some((pivot, value))) => Err(Error::NotPositiveDefinite {
                pivot: *pivot,
                value: *value,
            }),
            (None, None) => unreachable!("prior factorization state is always recorded"),
        }
    }

    /// Lower Cholesky factor of `omega`. Errors when `omega` is not
    /// positive definite, naming the offending pivot.
    pub fn omega_chol(&self) -> Result<&DMatrix<f64>> {
        Ok(&self.prior_factor()?.chol)
    }

    /// Inverse of `omega` (the prior precision).
    pub fn omega_inv(&self) -> Result<&DMatrix<f64>> {
        Ok(&self.prior_factor()?.inv)
    }

    pub fn omega_logdet(&self) -> Result<f64> {
        Ok(self.prior_factor()?.logdet)
    }
}

fn check_dims(
    record: &IndividualRecord,
    phi: &LatentPoint,
    theta: &PopulationParams,
    model: &dyn StructuralModel,
) -> Result<()> {
    let _ = record;
    if phi.dim() != theta.dim() {
        return Err(Error::DimensionMismatch {
            context: "phi vs psi_pop",
            expected: theta.dim(),
            got: phi.dim(),
        });
    }
    if model.dim() != theta.dim() {
        return Err(Error::DimensionMismatch {
            context: "model parameters vs psi_pop",
            expected: theta.dim(),
            got: model.dim(),
        });
    }
    Ok(())
}

/// Gaussian log prior of a latent point:
///
/// ```text
/// -(p/2) ln(2 pi) - (1/2) ln|omega| - (1/2) (phi - m)^T omega^{-1} (phi - m)
/// ```
pub fn log_prior(phi: &LatentPoint, theta: &PopulationParams) -> Result<f64> {
    if phi.dim() != theta.dim() {
        return Err(Error::DimensionMismatch {
            context: "phi vs psi_pop",
            expected: theta.dim(),
            got: phi.dim(),
        });
    }
    let factor = theta.prior_factor()?;
    let centered = phi.coords() - theta.prior_mode().coords();
    let quad = linalg::mahalanobis_sq(&factor.chol, &centered);
    Ok(-0.5 * (theta.dim() as f64) * ln_2pi() - 0.5 * factor.logdet - 0.5 * quad)
}

fn log_likelihood_of_predictions(
    record: &IndividualRecord,
    predictions: &[f64],
    sigma2: f64,
) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::Validation(format!(
            "sigma2 must be positive for likelihood evaluation, got {sigma2}"
        )));
    }
    if let Some(j) = predictions.iter().position(|f| !f.is_finite()) {
        return Err(Error::NonFinitePrediction { time_index: j });
    }
    let n = record.n_obs() as f64;
    let ssr: f64 = record
        .observations()
        .iter()
        .zip(predictions)
        .map(|(y, f)| (y - f) * (y - f))
        .sum();
    Ok(-0.5 * n * (ln_2pi() + sigma2.ln()) - ssr / (2.0 * sigma2))
}

/// Gaussian log likelihood of one individual's data at a latent point.
pub fn log_likelihood(
    record: &IndividualRecord,
    phi: &LatentPoint,
    theta: &PopulationParams,
    model: &dyn StructuralModel,
) -> Result<f64> {
    check_dims(record, phi, theta, model)?;
    let psi = theta.psi_from_phi(phi);
    let predictions = model.predict(record.times(), &psi, record.dose())?;
    log_likelihood_of_predictions(record, &predictions, theta.sigma2())
}

/// Unnormalized log posterior `log_likelihood + log_prior` of a latent
/// point.
///
/// Returns negative infinity (never NaN) when the implied `psi` leaves the
/// structural model's domain, so rejection-based samplers handle boundary
/// violations without special cases. Genuine evaluation failures (non-PD
/// `omega`, non-finite predictions inside the domain) remain errors.
pub fn log_joint(
    record: &IndividualRecord,
    phi: &LatentPoint,
    theta: &PopulationParams,
    model: &dyn StructuralModel,
) -> Result<f64> {
    check_dims(record, phi, theta, model)?;
    let psi = theta.psi_from_phi(phi);
    if !model.in_domain(&psi) {
        return Ok(NEG_INF);
    }
    let lp = log_prior(phi, theta)?;
    let predictions = model.predict(record.times(), &psi, record.dose())?;
    let ll = log_likelihood_of_predictions(record, &predictions, theta.sigma2())?;
    Ok(lp + ll)
}

/// Gradient of [`log_joint`] with respect to the latent coordinates:
///
/// ```text
/// J_phi^T (y - f) / sigma2 - omega^{-1} (phi - m)
/// ```
///
/// where `J_phi` is the structural Jacobian in latent coordinates
/// (chain-ruled through the per-coordinate transform). Errors outside the
/// model domain; callers that sample reject such points before requesting
/// gradients.
pub fn grad_log_joint(
    record: &IndividualRecord,
    phi: &LatentPoint,
    theta: &PopulationParams,
    model: &dyn StructuralModel,
) -> Result<DVector<f64>> {
    check_dims(record, phi, theta, model)?;
    if !(theta.sigma2() > 0.0) {
        return Err(Error::Validation(format!(
            "sigma2 must be positive for gradient evaluation, got {}",
            theta.sigma2()
        )));
    }
    let jac = jacobian_phi(model, record.times(), phi, theta, record.dose())?;
    let residuals = DVector::from_fn(record.n_obs(), |j, _| {
        record.observations()[j] - jac.values[j]
    });
    let omega_inv = theta.omega_inv()?;
    let centered = phi.coords() - theta.prior_mode().coords();
    Ok(jac.jac.transpose() * residuals / theta.sigma2() - omega_inv * centered)
}
