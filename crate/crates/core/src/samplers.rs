//! Metropolis-Hastings kernels over individual latent coordinates.
//!
//! Every kernel shares one step skeleton: draw a candidate, compute a
//! log acceptance ratio, draw one uniform variate from the open interval
//! and compare on the log scale. The uniform draw happens on every
//! iteration, including certain rejections and certain acceptances, so a
//! chain's random stream depends only on the kernel, the dimension, and
//! the iteration count.
//!
//! Per-iteration draw budget:
//!
//! ```text
//! prior-imh          p normals, 1 uniform
//! rwm-componentwise  p * (1 normal, 1 uniform), interleaved per coordinate
//! rwm-blockwise      p normals, 1 uniform
//! mala               p normals, 1 uniform   (skipped when the drift is unavailable)
//! nlme-imh           p normals, 1 uniform
//! ```
//!
//! Rejected iterations repeat the previous state bitwise; the stored log
//! posterior is finite at the initial state and never NaN afterwards.

use std::io::Write;

use nalgebra::DVector;
use rand::distributions::Open01;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{grad_log_joint, log_joint, log_prior, IndividualRecord, LatentPoint, PopulationParams};
use crate::proposal::GaussianProposal;
use crate::seed::derive_seed;
use crate::structural::StructuralModel;

const LN_2PI: f64 = 1.8378770664093453;

/// Multiplier on the prior standard deviation for the default
/// componentwise random-walk step.
pub const DEFAULT_RWM_COMPONENT_FACTOR: f64 = 0.4;
/// Dimension-scaled default factor for the blockwise random walk.
pub const DEFAULT_RWM_BLOCK_FACTOR: f64 = 2.4;
/// Default MALA drift scale; [`tune_mala`] refines it per target.
pub const DEFAULT_MALA_GAMMA: f64 = 1e-2;

/// A transition kernel together with its tuning constants.
#[derive(Debug, Clone)]
pub enum KernelConfig {
    /// Independence sampler proposing from the latent prior.
    PriorImh,
    /// One Metropolis update per coordinate per iteration; `steps[l]` is
    /// the standard deviation of the move on coordinate `l`.
    RwmComponentwise { steps: Vec<f64> },
    /// Joint random walk `x + step * chol(Omega) * z`, shaped by the
    /// prior covariance.
    RwmBlockwise { step: f64 },
    /// Langevin proposal `x + gamma * grad + sqrt(2 gamma) * z` with an
    /// uphill drift.
    Mala { gamma: f64 },
    /// Independence sampler from a posterior-adapted Gaussian.
    NlmeImh { proposal: GaussianProposal },
}

impl KernelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            KernelConfig::PriorImh => "prior-imh",
            KernelConfig::RwmComponentwise { .. } => "rwm-componentwise",
            KernelConfig::RwmBlockwise { .. } => "rwm-blockwise",
            KernelConfig::Mala { .. } => "mala",
            KernelConfig::NlmeImh { .. } => "nlme-imh",
        }
    }

    /// Componentwise walk with steps proportional to the prior standard
    /// deviations.
    pub fn default_componentwise(theta: &PopulationParams) -> KernelConfig {
        let steps = (0..theta.dim())
            .map(|l| DEFAULT_RWM_COMPONENT_FACTOR * theta.omega()[(l, l)].sqrt())
            .collect();
        KernelConfig::RwmComponentwise { steps }
    }

    /// Blockwise walk at the classic dimension-scaled step.
    pub fn default_blockwise(dim: usize) -> KernelConfig {
        KernelConfig::RwmBlockwise {
            step: DEFAULT_RWM_BLOCK_FACTOR / (dim as f64).sqrt(),
        }
    }

    /// Check tuning constants against the target dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            KernelConfig::PriorImh => Ok(()),
            KernelConfig::RwmComponentwise { steps } => {
                if steps.len() != dim {
                    return Err(Error::DimensionMismatch {
                        context: "componentwise steps vs latent dimension",
                        expected: dim,
                        got: steps.len(),
                    });
                }
                if steps.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(Error::Validation(
                        "componentwise steps must be finite and positive".into(),
                    ));
                }
                Ok(())
            }
            KernelConfig::RwmBlockwise { step } => {
                if !(step.is_finite() && *step > 0.0) {
                    return Err(Error::Validation(
                        "blockwise step must be finite and positive".into(),
                    ));
                }
                Ok(())
            }
            KernelConfig::Mala { gamma } => {
                if !(gamma.is_finite() && *gamma > 0.0) {
                    return Err(Error::Validation(
                        "mala gamma must be finite and positive".into(),
                    ));
                }
                Ok(())
            }
            KernelConfig::NlmeImh { proposal } => {
                if proposal.dim() != dim {
                    return Err(Error::DimensionMismatch {
                        context: "proposal vs latent dimension",
                        expected: dim,
                        got: proposal.dim(),
                    });
                }
                Ok(())
            }
        }
    }
}

/// Current position of a chain with its cached log posterior and, for
/// gradient kernels, the gradient at that position.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub phi: LatentPoint,
    /// Finite at construction, finite or the bitwise-repeated previous
    /// value afterwards; never NaN.
    pub logpost: f64,
    pub grad: Option<DVector<f64>>,
}

/// Result of one Metropolis-Hastings transition.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: ChainState,
    pub accepted: bool,
    /// True when a MALA gradient could not be evaluated finitely this
    /// iteration; such iterations always reject.
    pub grad_failed: bool,
}

/// A completed chain: `n_iter + 1` states with the initial state first.
#[derive(Debug, Clone)]
pub struct Chain {
    pub states: Vec<LatentPoint>,
    pub logpost: Vec<f64>,
    /// `accepted[0]` is true by convention; entry `k > 0` records whether
    /// iteration `k` moved.
    pub accepted: Vec<bool>,
    pub seed: u64,
    pub kernel: KernelConfig,
    /// MALA iterations rejected because a gradient was not finitely
    /// evaluable.
    pub grad_failures: u64,
}

impl Chain {
    /// Number of stored states (iterations plus one).
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.dim())
    }

    /// All values of one latent coordinate along the chain.
    pub fn coordinate(&self, l: usize) -> Vec<f64> {
        self.states.iter().map(|s| s.as_slice()[l]).collect()
    }

    /// Serialize the chain with one row per stored state. Columns:
    /// iteration, each latent coordinate, each natural-scale coordinate,
    /// log posterior, acceptance flag. Floats print in shortest
    /// round-trip form so rereading reproduces them bitwise.
    pub fn write_csv<W: Write>(
        &self,
        theta: &PopulationParams,
        param_names: &[String],
        out: &mut W,
    ) -> Result<()> {
        let p = self.dim();
        if param_names.len() != p {
            return Err(Error::DimensionMismatch {
                context: "parameter names vs latent dimension",
                expected: p,
                got: param_names.len(),
            });
        }
        write!(out, "iteration")?;
        for name in param_names {
            write!(out, ",phi_{name}")?;
        }
        for name in param_names {
            write!(out, ",psi_{name}")?;
        }
        writeln!(out, ",logpost,accepted")?;
        for (k, state) in self.states.iter().enumerate() {
            write!(out, "{k}")?;
            for v in state.as_slice() {
                write!(out, ",{v}")?;
            }
            for v in theta.psi_from_phi(state) {
                write!(out, ",{v}")?;
            }
            writeln!(out, ",{},{}", self.logpost[k], self.accepted[k])?;
        }
        Ok(())
    }
}

/// Log density of an isotropic Gaussian with variance `var` per
/// coordinate.
fn isotropic_logpdf(x: &DVector<f64>, mean: &DVector<f64>, var: f64) -> f64 {
    let diff = x - mean;
    -0.5 * (x.len() as f64 * (LN_2PI + var.ln()) + diff.norm_squared() / var)
}

/// Log density of the MALA move `from -> to` given the gradient at
/// `from`: a Gaussian centered on the drifted point with variance
/// `2 gamma`.
pub fn mala_transition_logpdf(
    from: &LatentPoint,
    grad_at_from: &DVector<f64>,
    to: &LatentPoint,
    gamma: f64,
) -> f64 {
    let mean = from.coords() + gamma * grad_at_from;
    isotropic_logpdf(to.coords(), &mean, 2.0 * gamma)
}

/// Gradient evaluation that separates "not finitely evaluable here"
/// (returned as `None`, a rejection for gradient kernels) from genuine
/// failures, which propagate.
fn try_gradient(
    record: &IndividualRecord,
    phi: &LatentPoint,
    theta: &PopulationParams,
    model: &dyn StructuralModel,
) -> Result<Option<DVector<f64>>> {
    match grad_log_joint(record, phi, theta, model) {
        Ok(g) if g.iter().all(|v| v.is_finite()) => Ok(Some(g)),
        Ok(_) => Ok(None),
        Err(Error::NonFiniteDerivative { .. })
        | Err(Error::NonFinitePrediction { .. })
        | Err(Error::Validation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Log joint at a candidate point. A prediction overflowing inside the
/// domain rejects like an out-of-domain candidate instead of aborting
/// the chain.
fn try_logpost(
    record: &IndividualRecord,
    phi: &LatentPoint,
    theta: &PopulationParams,
    model: &dyn StructuralModel,
) -> Result<f64> {
    match log_joint(record, phi, theta, model) {
        Ok(v) => Ok(v),
        Err(Error::NonFinitePrediction { .. }) => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    }
}

/// A drawn MALA candidate with everything the acceptance ratio needs.
#[derive(Debug, Clone)]
pub struct MalaProposal {
    /// Gradient at the current point when it was evaluable; callers may
    /// cache it on rejection.
    pub current_grad: Option<DVector<f64>>,
    /// `None` when no candidate could be formed (gradient failure or a
    /// non-finite draw); the iteration then rejects.
    pub candidate: Option<LatentPoint>,
    /// Log joint at the candidate; negative infinity when unavailable or
    /// out of domain.
    pub candidate_logpost: f64,
    pub candidate_grad: Option<DVector<f64>>,
    pub log_q_forward: f64,
    /// Negative infinity when the reverse move has no density, which
    /// forces rejection.
    pub log_q_backward: f64,
    /// True when this iteration must reject because a gradient was not
    /// finitely evaluable.
    pub grad_failed: bool,
}

impl MalaProposal {
    fn failed(current_grad: Option<DVector<f64>>) -> Self {
        Self {
            current_grad,
            candidate: None,
            candidate_logpost: f64::NEG_INFINITY,
            candidate_grad: None,
            log_q_forward: 0.0,
            log_q_backward: f64::NEG_INFINITY,
            grad_failed: true,
        }
    }
}

/// Draw a Langevin candidate from `state` and evaluate both transition
/// densities. Consumes `dim` normal draws unless the drift itself is
/// unavailable.
pub fn mala_candidate<R: Rng + ?Sized>(
    state: &ChainState,
    record: &IndividualRecord,
    theta: &PopulationParams,
    model: &dyn StructuralModel,
    gamma: f64,
    rng: &mut R,
) -> Result<MalaProposal> {
    let grad_x = match &state.grad {
        Some(g) => Some(g.clone()),
        None => try_gradient(record, &state.phi, theta, model)?,
    };
    let Some(grad_x) = grad_x else {
        return Ok(MalaProposal::failed(None));
    };

    let mean_x = state.phi.coords() + gamma * &grad_x;
    if mean_x.iter().any(|v| !v.is_finite()) {
        return Ok(MalaProposal::failed(Some(grad_x)));
    }
    let spread = (2.0 * gamma).sqrt();
    let z = DVector::from_iterator(
        state.phi.dim(),
        (0..state.phi.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    let cand_vec = &mean_x + spread * z;
    if cand_vec.iter().any(|v| !v.is_finite()) {
        return Ok(MalaProposal::failed(Some(grad_x)));
    }
    let log_q_forward = isotropic_logpdf(&cand_vec, &mean_x, 2.0 * gamma);
    let candidate = LatentPoint::from_dvector(cand_vec)?;
    let candidate_logpost = try_logpost(record, &candidate, theta, model)?;

    if candidate_logpost == f64::NEG_INFINITY {
        return Ok(MalaProposal {
            current_grad: Some(grad_x),
            candidate: Some(candidate),
            candidate_logpost,
            candidate_grad: None,
            log_q_forward,
            log_q_backward: f64::NEG_INFINITY,
            grad_failed: false,
        });
    }

    match try_gradient(record, &candidate, theta, model)? {
        Some(grad_c) => {
            let log_q_backward = mala_transition_logpdf(&candidate, &grad_c, &state.phi, gamma);
            Ok(MalaProposal {
                current_grad: Some(grad_x),
                candidate: Some(candidate),
                candidate_logpost,
                candidate_grad: Some(grad_c),
                log_q_forward,
                log_q_backward,
                grad_failed: !log_q_backward.is_finite(),
            })
        }
        None => Ok(MalaProposal {
            current_grad: Some(grad_x),
            candidate: Some(candidate),
            candidate_logpost,
            candidate_grad: None,
            log_q_forward,
            log_q_backward: f64::NEG_INFINITY,
            grad_failed: true,
        }),
    }
}

/// Log-scale acceptance decision; always consumes one uniform draw from
/// the open interval.
fn accept_move<R: Rng + ?Sized>(log_alpha: f64, rng: &mut R) -> bool {
    let u: f64 = rng.sample(Open01);
    log_alpha >= 0.0 || u.ln() < log_alpha
}

/// One Metropolis-Hastings transition from `state`.
///
/// Requires a finite `state.logpost`; [`run_chain`] establishes this at
/// the initial state and every accepted move preserves it.
pub fn mh_step<R: Rng + ?Sized>(
    state: &ChainState,
    kernel: &KernelConfig,
    record: &IndividualRecord,
    theta: &PopulationParams,
    model: &dyn StructuralModel,
    rng: &mut R,
) -> Result<StepOutcome> {
    if !state.logpost.is_finite() {
        return Err(Error::Validation(
            "mh_step requires a finite log posterior at the current state".into(),
        ));
    }
    let p = state.phi.dim();
    match kernel {
        KernelConfig::PriorImh => {
            let chol = theta.omega_chol()?.clone();
            let z = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let cand_vec = theta.prior_mode().coords() + &chol * z;
            let candidate = LatentPoint::from_dvector(cand_vec)?;
            let cand_logpost = try_logpost(record, &candidate, theta, model)?;
            let log_alpha = (cand_logpost - state.logpost)
                + (log_prior(&state.phi, theta)? - log_prior(&candidate, theta)?);
            finish_symmetric_or_imh(state, candidate, cand_logpost, log_alpha, rng)
        }
        KernelConfig::RwmComponentwise { steps } => {
            let mut current = state.phi.as_slice().to_vec();
            let mut current_logpost = state.logpost;
            let mut any_accepted = false;
            for l in 0..p {
                let z: f64 = rng.sample(StandardNormal);
                let mut cand_coords = current.clone();
                cand_coords[l] += steps[l] * z;
                let candidate = LatentPoint::new(cand_coords)?;
                let cand_logpost = try_logpost(record, &candidate, theta, model)?;
                let log_alpha = cand_logpost - current_logpost;
                if accept_move(log_alpha, rng) && cand_logpost.is_finite() {
                    current = candidate.as_slice().to_vec();
                    current_logpost = cand_logpost;
                    any_accepted = true;
                }
            }
            let phi = LatentPoint::new(current)?;
            Ok(StepOutcome {
                state: ChainState {
                    phi,
                    logpost: current_logpost,
                    grad: None,
                },
                accepted: any_accepted,
                grad_failed: false,
            })
        }
        KernelConfig::RwmBlockwise { step } => {
            let chol = theta.omega_chol()?.clone();
            let z = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let cand_vec = state.phi.coords() + *step * (&chol * z);
            let candidate = LatentPoint::from_dvector(cand_vec)?;
            let cand_logpost = try_logpost(record, &candidate, theta, model)?;
            let log_alpha = cand_logpost - state.logpost;
            finish_symmetric_or_imh(state, candidate, cand_logpost, log_alpha, rng)
        }
        KernelConfig::Mala { gamma } => {
            let mp = mala_candidate(state, record, theta, model, *gamma, rng)?;
            let log_alpha = (mp.candidate_logpost - state.logpost)
                + (mp.log_q_backward - mp.log_q_forward);
            let accepted = accept_move(log_alpha, rng)
                && mp.candidate.is_some()
                && mp.candidate_logpost.is_finite();
            if accepted {
                Ok(StepOutcome {
                    state: ChainState {
                        phi: mp.candidate.expect("accepted candidate exists"),
                        logpost: mp.candidate_logpost,
                        grad: mp.candidate_grad,
                    },
                    accepted: true,
                    grad_failed: false,
                })
            } else {
                Ok(StepOutcome {
                    state: ChainState {
                        phi: state.phi.clone(),
                        logpost: state.logpost,
                        grad: state.grad.clone().or(mp.current_grad),
                    },
                    accepted: false,
                    grad_failed: mp.grad_failed,
                })
            }
        }
        KernelConfig::NlmeImh { proposal } => {
            let cand_vec = proposal.sample_vector(rng);
            if cand_vec.iter().any(|v| !v.is_finite()) {
                let _ = accept_move(f64::NEG_INFINITY, rng);
                return Ok(StepOutcome {
                    state: state.clone(),
                    accepted: false,
                    grad_failed: false,
                });
            }
            let candidate = LatentPoint::from_dvector(cand_vec)?;
            let cand_logpost = try_logpost(record, &candidate, theta, model)?;
            let log_alpha = (cand_logpost - state.logpost)
                + (proposal.logpdf(&state.phi) - proposal.logpdf(&candidate));
            finish_symmetric_or_imh(state, candidate, cand_logpost, log_alpha, rng)
        }
    }
}

/// Shared tail of the single-candidate kernels: decide, then either move
/// to the candidate or repeat the current state bitwise.
fn finish_symmetric_or_imh<R: Rng + ?Sized>(
    state: &ChainState,
    candidate: LatentPoint,
    cand_logpost: f64,
    log_alpha: f64,
    rng: &mut R,
) -> Result<StepOutcome> {
    let accepted = accept_move(log_alpha, rng) && cand_logpost.is_finite();
    if accepted {
        Ok(StepOutcome {
            state: ChainState {
                phi: candidate,
                logpost: cand_logpost,
                grad: None,
            },
            accepted: true,
            grad_failed: false,
        })
    } else {
        Ok(StepOutcome {
            state: ChainState {
                phi: state.phi.clone(),
                logpost: state.logpost,
                grad: state.grad.clone(),
            },
            accepted: false,
            grad_failed: false,
        })
    }
}

/// Run `n_iter` transitions from `init` with a dedicated generator
/// seeded by `seed`. The returned chain stores `n_iter + 1` states.
pub fn run_chain(
    record: &IndividualRecord,
    theta: &PopulationParams,
    model: &dyn StructuralModel,
    kernel: &KernelConfig,
    init: &LatentPoint,
    n_iter: usize,
    seed: u64,
) -> Result<Chain> {
    let p = theta.dim();
    if init.dim() != p {
        return Err(Error::DimensionMismatch {
            context: "init vs psi_pop",
            expected: p,
            got: init.dim(),
        });
    }
    kernel.validate(p)?;
    if matches!(kernel, KernelConfig::PriorImh | KernelConfig::RwmBlockwise { .. }) {
        theta.omega_chol()?;
    }
    let logpost0 = log_joint(record, init, theta, model)?;
    if !logpost0.is_finite() {
        return Err(Error::Validation(
            "initial state has non-finite log posterior".into(),
        ));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut state = ChainState {
        phi: init.clone(),
        logpost: logpost0,
        grad: None,
    };
    let mut states = Vec::with_capacity(n_iter + 1);
    let mut logpost = Vec::with_capacity(n_iter + 1);
    let mut accepted = Vec::with_capacity(n_iter + 1);
    states.push(state.phi.clone());
    logpost.push(state.logpost);
    accepted.push(true);
    let mut grad_failures = 0u64;

    for _ in 0..n_iter {
        let outcome = mh_step(&state, kernel, record, theta, model, &mut rng)?;
        if outcome.grad_failed {
            grad_failures += 1;
        }
        state = outcome.state;
        states.push(state.phi.clone());
        logpost.push(state.logpost);
        accepted.push(outcome.accepted);
    }

    Ok(Chain {
        states,
        logpost,
        accepted,
        seed,
        kernel: kernel.clone(),
        grad_failures,
    })
}

/// Acceptance rate measured for one drift scale.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GammaAcceptance {
    pub gamma: f64,
    pub acceptance: f64,
}

/// Run one MALA chain per candidate `gamma` and report acceptance
/// rates. Chain `i` uses the stream seed `derive_seed(seed, i)`.
pub fn tune_mala(
    record: &IndividualRecord,
    theta: &PopulationParams,
    model: &dyn StructuralModel,
    init: &LatentPoint,
    gammas: &[f64],
    n_iter: usize,
    seed: u64,
) -> Result<Vec<GammaAcceptance>> {
    if gammas.is_empty() || n_iter == 0 {
        return Err(Error::Validation(
            "tuning requires at least one gamma and one iteration".into(),
        ));
    }
    let mut out = Vec::with_capacity(gammas.len());
    for (i, &gamma) in gammas.iter().enumerate() {
        let kernel = KernelConfig::Mala { gamma };
        let chain = run_chain(record, theta, model, &kernel, init, n_iter, derive_seed(seed, i as u64))?;
        let n_accepted = chain.accepted[1..].iter().filter(|a| **a).count();
        out.push(GammaAcceptance {
            gamma,
            acceptance: n_accepted as f64 / n_iter as f64,
        });
    }
    Ok(out)
}
