//! Individual MAP estimation in latent coordinates.
//!
//! Maximizes `log_joint` with a quasi-Newton ascent: BFGS updates of an
//! inverse-Hessian approximation plus a backtracking line search enforcing
//! sufficient increase. The optimizer never leaves the latent space, where
//! the prior term is an exact quadratic; domain violations simply evaluate
//! to negative infinity and are backtracked over.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{grad_log_joint, log_joint, IndividualRecord, LatentPoint, PopulationParams};
use crate::structural::StructuralModel;

/// Sufficient-increase constant for the backtracking line search.
const ARMIJO_C1: f64 = 1e-4;
/// Give up backtracking once the step underflows this fraction of the
/// initial trial step.
const MIN_STEP_FRACTION: f64 = 1e-16;

/// Stopping and step-size controls for [`find_map`].
#[derive(Debug, Clone)]
pub struct MapOptions {
    /// Convergence threshold on the infinity norm of the gradient.
    pub gtol: f64,
    /// Maximum number of accepted ascent steps.
    pub max_iter: usize,
    /// First trial step length of each line search.
    pub initial_step: f64,
    /// Multiplicative backtracking factor in (0, 1).
    pub backtrack_factor: f64,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            gtol: 1e-6,
            max_iter: 200,
            initial_step: 1.0,
            backtrack_factor: 0.5,
        }
    }
}

/// A MAP estimate with its convergence certificate.
///
/// `converged` is true exactly when `grad_norm <= gtol`; hitting the
/// iteration cap returns a result with `converged = false` rather than an
/// error so callers can inspect how far the ascent got.
#[derive(Debug, Clone)]
pub struct MapResult {
    pub phi_hat: LatentPoint,
    /// `log_joint` at `phi_hat`.
    pub objective: f64,
    /// Infinity norm of the log-joint gradient at `phi_hat`.
    pub grad_norm: f64,
    /// Accepted ascent steps taken.
    pub iterations: usize,
    pub converged: bool,
}

/// Maximize the joint density over latent coordinates, starting from
/// `init` (the prior mode when `None`).
pub fn find_map(
    record: &IndividualRecord,
    theta: &PopulationParams,
    model: &dyn StructuralModel,
    init: Option<&LatentPoint>,
    opts: &MapOptions,
) -> Result<MapResult> {
    find_map_traced(record, theta, model, init, opts).map(|(r, _)| r)
}

/// As [`find_map`], also returning the objective value after the initial
/// point and each accepted step. The trace is nondecreasing by
/// construction of the line search.
pub fn find_map_traced(
    record: &IndividualRecord,
    theta: &PopulationParams,
    model: &dyn StructuralModel,
    init: Option<&LatentPoint>,
    opts: &MapOptions,
) -> Result<(MapResult, Vec<f64>)> {
    if !(opts.gtol > 0.0)
        || !(opts.initial_step > 0.0)
        || !(opts.backtrack_factor > 0.0 && opts.backtrack_factor < 1.0)
    {
        return Err(Error::Validation(
            "map options require gtol > 0, initial_step > 0, backtrack_factor in (0, 1)".into(),
        ));
    }

    let p = theta.dim();
    let prior_mode = theta.prior_mode();
    let start = init.unwrap_or(&prior_mode);
    if start.dim() != p {
        return Err(Error::DimensionMismatch {
            context: "init vs psi_pop",
            expected: p,
            got: start.dim(),
        });
    }

    let mut x = start.clone();
    let mut fx = log_joint(record, &x, theta, model)?;
    if !fx.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let mut grad = grad_log_joint(record, &x, theta, model)?;
    let mut trace = vec![fx];

    let mut inv_hessian = DMatrix::<f64>::identity(p, p);
    let mut scaled_once = false;
    let mut reset_after_stall = false;
    let mut iterations = 0usize;

    while iterations < opts.max_iter {
        if grad.amax() <= opts.gtol {
            break;
        }

        let mut direction = &inv_hessian * &grad;
        // Ascent requires positive slope along the direction; a corrupted
        // curvature approximation falls back to steepest ascent.
        if grad.dot(&direction) <= 0.0 {
            inv_hessian = DMatrix::identity(p, p);
            direction = grad.clone();
        }
        let slope = grad.dot(&direction);

        let mut step = opts.initial_step;
        let mut accepted: Option<(LatentPoint, f64)> = None;
        while step >= MIN_STEP_FRACTION * opts.initial_step {
            let trial_coords = x.coords() + step * &direction;
            if let Ok(trial) = LatentPoint::from_dvector(trial_coords) {
                // A prediction overflowing inside the domain behaves
                // like an out-of-domain point: an unusable trial the
                // search backs away from.
                let f_trial = match log_joint(record, &trial, theta, model) {
                    Ok(v) => v,
                    Err(Error::NonFinitePrediction { .. }) => f64::NEG_INFINITY,
                    Err(e) => return Err(e),
                };
                if f_trial >= fx + ARMIJO_C1 * step * slope && f_trial.is_finite() {
                    accepted = Some((trial, f_trial));
                    break;
                }
            }
            step *= opts.backtrack_factor;
        }

        let Some((x_new, f_new)) = accepted else {
            // Stalled line search: retry once from steepest ascent before
            // reporting whatever certificate the current point earns.
            if !reset_after_stall {
                reset_after_stall = true;
                inv_hessian = DMatrix::identity(p, p);
                continue;
            }
            break;
        };
        reset_after_stall = false;

        let grad_new = grad_log_joint(record, &x_new, theta, model)?;
        let s = x_new.coords() - x.coords();
        // BFGS works on the negated (convex) problem; with ascent
        // gradients the curvature pair flips sign.
        let y = &grad - &grad_new;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if !scaled_once {
                inv_hessian *= sy / y.dot(&y);
                scaled_once = true;
            }
            let rho = 1.0 / sy;
            let identity = DMatrix::<f64>::identity(p, p);
            let left = &identity - rho * &s * y.transpose();
            inv_hessian = &left * inv_hessian * left.transpose() + rho * &s * s.transpose();
        }

        x = x_new;
        fx = f_new;
        grad = grad_new;
        iterations += 1;
        trace.push(fx);
    }

    let grad_norm = grad.amax();
    Ok((
        MapResult {
            converged: grad_norm <= opts.gtol,
            phi_hat: x,
            objective: fx,
            grad_norm,
            iterations,
        },
        trace,
    ))
}

/// Gradient of the log joint, exposed for samplers that share the MAP
/// geometry.
pub fn objective_gradient(
    record: &IndividualRecord,
    phi: &LatentPoint,
    theta: &PopulationParams,
    model: &dyn StructuralModel,
) -> Result<DVector<f64>> {
    grad_log_joint(record, phi, theta, model)
}
