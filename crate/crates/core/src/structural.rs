//! Structural models: the mapping from individual parameters to predicted
//! observations, with Jacobians in either coordinate system.
//!
//! The built-in one-compartment oral absorption model is
//!
//! ```text
//! c(t) = D ka / (V (ka - k)) * (exp(-k t) - exp(-ka t))
//! ```
//!
//! evaluated through `expm1` so the difference of exponentials keeps full
//! precision when `ka` and `k` approach each other, and replaced by its
//! analytic limit `D m t / V * exp(-m t)` with `m = (ka + k) / 2` inside a
//! relative window `|ka - k| <= 1e-8 * max(ka, k)`.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{LatentPoint, PopulationParams};

/// Relative half-width of the `ka = k` degeneracy window.
const DEGENERACY_REL: f64 = 1e-8;

/// How a Jacobian was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianMethod {
    Analytic,
    CentralDifference,
}

/// Predictions together with their parameter sensitivities.
///
/// `jac[(j, l)]` is the derivative of prediction `j` with respect to
/// parameter `l`, in whichever coordinates the producing function
/// documents.
#[derive(Debug, Clone)]
pub struct JacobianResult {
    pub values: Vec<f64>,
    pub jac: DMatrix<f64>,
    pub method: JacobianMethod,
}

/// A deterministic input-output model for one individual.
///
/// Implementations must be pure: same inputs, same outputs, no interior
/// state. `domain` gives a per-parameter open interval; callers never
/// invoke `predict` outside it.
pub trait StructuralModel: Send + Sync {
    fn name(&self) -> &str;

    fn param_names(&self) -> Vec<String>;

    /// Per-parameter open domain intervals `(lo, hi)`.
    fn domain(&self) -> Vec<(f64, f64)>;

    fn dim(&self) -> usize {
        self.param_names().len()
    }

    /// `psi` lies strictly inside every domain interval and is finite.
    fn in_domain(&self, psi: &[f64]) -> bool {
        psi.len() == self.dim()
            && psi
                .iter()
                .zip(self.domain())
                .all(|(&v, (lo, hi))| v.is_finite() && v > lo && v < hi)
    }

    /// Predicted observation at each time.
    fn predict(&self, times: &[f64], psi: &[f64], dose: f64) -> Result<Vec<f64>>;

    /// Closed-form Jacobian `d f / d psi` when the model provides one.
    /// Returning `None` selects the central-difference fallback.
    fn analytic_jacobian(
        &self,
        times: &[f64],
        psi: &[f64],
        dose: f64,
    ) -> Option<Result<DMatrix<f64>>> {
        let _ = (times, psi, dose);
        None
    }
}

fn check_psi(model: &dyn StructuralModel, psi: &[f64]) -> Result<()> {
    if psi.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            context: "psi vs model parameters",
            expected: model.dim(),
            got: psi.len(),
        });
    }
    if !model.in_domain(psi) {
        return Err(Error::Validation(format!(
            "psi {psi:?} is outside the domain of model '{}'",
            model.name()
        )));
    }
    Ok(())
}

/// `phi(x) = (1 - exp(-x)) / x`, the bounded factor in the concentration
/// profile. Continuous with `phi(0) = 1`.
fn phi_factor(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        -f64::exp_m1(-x) / x
    }
}

/// `phi'(x)`, with a series branch where the direct expression cancels.
fn phi_factor_deriv(x: f64) -> f64 {
    if x.abs() <= 1e-3 {
        -0.5 + x / 3.0 - x * x / 8.0 + x * x * x / 30.0
    } else {
        ((-x).exp() * (1.0 + x) - 1.0) / (x * x)
    }
}

/// Concentration of the one-compartment oral model at a single time.
///
/// Callers guarantee `ka > 0`, `v > 0`, `k > 0`, `dose > 0`, `t >= 0`.
fn pk1_oral_at(t: f64, ka: f64, v: f64, k: f64, dose: f64) -> f64 {
    debug_assert!(ka > 0.0 && v > 0.0 && k > 0.0 && dose > 0.0 && t >= 0.0);
    if t == 0.0 {
        return 0.0;
    }
    if (ka - k).abs() <= DEGENERACY_REL * ka.max(k) {
        let m = 0.5 * (ka + k);
        return dose * m * t / v * (-m * t).exp();
    }
    // The difference-of-exponentials factor is symmetric in (ka, k).
    // Keeping the smaller rate in the exponent makes both factors
    // bounded, so widely separated rates cannot overflow phi.
    let (slow, x) = if ka >= k {
        (k, (ka - k) * t)
    } else {
        (ka, (k - ka) * t)
    };
    dose * ka * t / v * (-slow * t).exp() * phi_factor(x)
}

/// Concentration profile of the one-compartment oral absorption model over
/// a time grid.
///
/// Inputs must satisfy `ka > 0`, `v > 0`, `k > 0`, `dose > 0` and
/// `times[j] >= 0`; the output is then finite and nonnegative.
pub fn pk1_oral(times: &[f64], ka: f64, v: f64, k: f64, dose: f64) -> Vec<f64> {
    times.iter().map(|&t| pk1_oral_at(t, ka, v, k, dose)).collect()
}

/// One-compartment oral absorption model with parameters `(ka, V, k)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pk1Oral;

impl StructuralModel for Pk1Oral {
    fn name(&self) -> &str {
        "pk1-oral"
    }

    fn param_names(&self) -> Vec<String> {
        vec!["ka".into(), "V".into(), "k".into()]
    }

    fn domain(&self) -> Vec<(f64, f64)> {
        vec![(0.0, f64::INFINITY); 3]
    }

    fn predict(&self, times: &[f64], psi: &[f64], dose: f64) -> Result<Vec<f64>> {
        check_psi(self, psi)?;
        Ok(pk1_oral(times, psi[0], psi[1], psi[2], dose))
    }

    fn analytic_jacobian(
        &self,
        times: &[f64],
        psi: &[f64],
        dose: f64,
    ) -> Option<Result<DMatrix<f64>>> {
        if let Err(e) = check_psi(self, psi) {
            return Some(Err(e));
        }
        let (ka, v, k) = (psi[0], psi[1], psi[2]);
        let mut jac = DMatrix::zeros(times.len(), 3);
        for (j, &t) in times.iter().enumerate() {
            if t == 0.0 {
                continue;
            }
            // Written through c = (D ka t / V) exp(-slow t) phi(x) with
            // the smaller rate in the exponent, mirroring the prediction,
            // so every factor stays bounded. With x = (ka - k) t >= 0:
            //   dc/dka = (D t / V) exp(-k t) [phi + ka t phi']
            //   dc/dk  = -(D ka t^2 / V) exp(-k t) [phi + phi']
            // and with x = (k - ka) t > 0 on the reflected branch:
            //   dc/dka = (D t / V) exp(-ka t) [phi - ka t (phi + phi')]
            //   dc/dk  = (D ka t^2 / V) exp(-ka t) phi'
            // In both cases dc/dV = -c / V.
            let base = dose * t / v;
            if ka >= k {
                let x = (ka - k) * t;
                let e = (-k * t).exp();
                let p = phi_factor(x);
                let dp = phi_factor_deriv(x);
                jac[(j, 0)] = base * e * (p + ka * t * dp);
                jac[(j, 1)] = -base * ka * e * p / v;
                jac[(j, 2)] = -base * ka * t * e * (p + dp);
            } else {
                let x = (k - ka) * t;
                let e = (-ka * t).exp();
                let p = phi_factor(x);
                let dp = phi_factor_deriv(x);
                jac[(j, 0)] = base * e * (p - ka * t * (p + dp));
                jac[(j, 1)] = -base * ka * e * p / v;
                jac[(j, 2)] = base * ka * t * e * dp;
            }
        }
        Some(Ok(jac))
    }
}

/// Polynomial-in-time test model `f(t) = sum_l psi_l t^l` with unrestricted
/// parameters. With a single coefficient this is the constant model whose
/// posterior is available in closed form, which the test suites lean on.
#[derive(Debug, Clone)]
pub struct LinearModel {
    n_coeffs: usize,
}

impl LinearModel {
    pub fn new(n_coeffs: usize) -> Self {
        assert!(n_coeffs >= 1, "at least one coefficient");
        Self { n_coeffs }
    }

    /// The one-parameter model `f(t) = psi`.
    pub fn constant() -> Self {
        Self::new(1)
    }
}

impl StructuralModel for LinearModel {
    fn name(&self) -> &str {
        "linear"
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.n_coeffs).map(|l| format!("c{l}")).collect()
    }

    fn domain(&self) -> Vec<(f64, f64)> {
        vec![(f64::NEG_INFINITY, f64::INFINITY); self.n_coeffs]
    }

    fn predict(&self, times: &[f64], psi: &[f64], dose: f64) -> Result<Vec<f64>> {
        let _ = dose;
        check_psi(self, psi)?;
        Ok(times
            .iter()
            .map(|&t| {
                let mut acc = 0.0;
                let mut pow = 1.0;
                for &c in psi {
                    acc += c * pow;
                    pow *= t;
                }
                acc
            })
            .collect())
    }

    fn analytic_jacobian(
        &self,
        times: &[f64],
        psi: &[f64],
        dose: f64,
    ) -> Option<Result<DMatrix<f64>>> {
        let _ = dose;
        if let Err(e) = check_psi(self, psi) {
            return Some(Err(e));
        }
        let mut jac = DMatrix::zeros(times.len(), self.n_coeffs);
        for (j, &t) in times.iter().enumerate() {
            let mut pow = 1.0;
            for l in 0..self.n_coeffs {
                jac[(j, l)] = pow;
                pow *= t;
            }
        }
        Some(Ok(jac))
    }
}

/// Jacobian `d f / d psi` at `psi`, using the model's closed form when
/// available and central differences with step `eps^(1/3) max(1, |psi_l|)`
/// otherwise. Every entry is checked finite.
pub fn jacobian(
    model: &dyn StructuralModel,
    times: &[f64],
    psi: &[f64],
    dose: f64,
) -> Result<JacobianResult> {
    check_psi(model, psi)?;
    let values = model.predict(times, psi, dose)?;

    let (jac, method) = match model.analytic_jacobian(times, psi, dose) {
        Some(j) => (j?, JacobianMethod::Analytic),
        None => {
            let p = model.dim();
            let mut jac = DMatrix::zeros(times.len(), p);
            for l in 0..p {
                let h = f64::EPSILON.cbrt() * psi[l].abs().max(1.0);
                let mut hi = psi.to_vec();
                let mut lo = psi.to_vec();
                hi[l] += h;
                lo[l] -= h;
                let f_hi = model.predict(times, &hi, dose)?;
                let f_lo = model.predict(times, &lo, dose)?;
                for j in 0..times.len() {
                    jac[(j, l)] = (f_hi[j] - f_lo[j]) / (2.0 * h);
                }
            }
            (jac, JacobianMethod::CentralDifference)
        }
    };

    if jac.nrows() != times.len() || jac.ncols() != model.dim() {
        return Err(Error::DimensionMismatch {
            context: "jacobian shape vs times x parameters",
            expected: times.len() * model.dim(),
            got: jac.nrows() * jac.ncols(),
        });
    }
    for j in 0..jac.nrows() {
        for l in 0..jac.ncols() {
            if !jac[(j, l)].is_finite() {
                return Err(Error::NonFiniteDerivative { row: j, col: l });
            }
        }
    }
    Ok(JacobianResult { values, jac, method })
}

/// Jacobian `d f / d phi` at a latent point: the psi-space Jacobian
/// chain-ruled through the transform, `df/dphi_l = df/dpsi_l * dpsi_l/dphi_l`.
pub fn jacobian_phi(
    model: &dyn StructuralModel,
    times: &[f64],
    phi: &LatentPoint,
    theta: &PopulationParams,
    dose: f64,
) -> Result<JacobianResult> {
    let psi = theta.psi_from_phi(phi);
    let mut result = jacobian(model, times, &psi, dose)?;
    let scale = theta.dpsi_dphi(&psi);
    for l in 0..result.jac.ncols() {
        let s = scale[l];
        for j in 0..result.jac.nrows() {
            result.jac[(j, l)] *= s;
        }
    }
    Ok(result)
}

/// Structural models selectable by name.
///
/// Ships with `pk1-oral`, `linear` (two coefficients) and `constant`;
/// user models are added with [`ModelRegistry::register`].
pub struct ModelRegistry {
    models: BTreeMap<String, Arc<dyn StructuralModel>>,
}

impl ModelRegistry {
    pub fn with_builtins() -> Self {
        let mut reg = Self {
            models: BTreeMap::new(),
        };
        reg.register("pk1-oral", Arc::new(Pk1Oral)).unwrap();
        reg.register("linear", Arc::new(LinearModel::new(2))).unwrap();
        reg.register("constant", Arc::new(LinearModel::constant()))
            .unwrap();
        reg
    }

    /// Register a model under `name`. Names are unique; re-registration is
    /// an error rather than a silent replacement.
    pub fn register(&mut self, name: &str, model: Arc<dyn StructuralModel>) -> Result<()> {
        if self.models.contains_key(name) {
            return Err(Error::Validation(format!(
                "model '{name}' is already registered"
            )));
        }
        self.models.insert(name.to_string(), model);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn StructuralModel>> {
        self.models.get(name).cloned()
    }

    /// Registered names in lexicographic order.
    pub fn names(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }
}
