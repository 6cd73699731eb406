//! Synthetic population generation and dataset serialization.
//!
//! Each individual draws its latent coordinates from the population law
//! and its observation noise from the residual model, using a private
//! generator derived from the master seed and the individual's index.
//! Adding individuals to a configuration therefore never perturbs the
//! ones already generated.

use std::io::{Read, Write};

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{IndividualRecord, LatentPoint, PopulationParams};
use crate::seed::derive_seed;
use crate::structural::StructuralModel;

/// Sampling grid used when a configuration does not override it: dense
/// early, sparse late, in hours.
pub fn default_times() -> Vec<f64> {
    vec![0.5, 1.0, 2.0, 4.0, 8.0, 12.0, 24.0, 36.0, 48.0, 72.0, 96.0, 120.0]
}

/// Body weight specification; dose is weight times `dose_per_kg`.
#[derive(Debug, Clone)]
pub enum WeightSpec {
    Fixed(f64),
    PerIndividual(Vec<f64>),
}

/// Everything needed to generate one synthetic population.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_individuals: usize,
    pub times: Vec<f64>,
    pub theta: PopulationParams,
    pub dose_per_kg: f64,
    pub weight: WeightSpec,
    pub seed: u64,
}

/// Generated records together with the latent points that produced
/// them, index-aligned.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub records: Vec<IndividualRecord>,
    pub truths: Vec<LatentPoint>,
}

/// Generate a synthetic population.
///
/// A zero population covariance degenerates cleanly: every individual
/// reuses the population latent point. Zero residual variance likewise
/// reproduces the structural curve exactly, so a fully degenerate
/// configuration emits identical, noiseless records.
pub fn simulate(config: &SimConfig, model: &dyn StructuralModel) -> Result<SimOutput> {
    if config.n_individuals == 0 {
        return Err(Error::Validation("n_individuals must be at least 1".into()));
    }
    let p = config.theta.dim();
    if p != model.dim() {
        return Err(Error::DimensionMismatch {
            context: "population parameters vs model",
            expected: model.dim(),
            got: p,
        });
    }
    if !(config.dose_per_kg > 0.0 && config.dose_per_kg.is_finite()) {
        return Err(Error::Validation("dose_per_kg must be finite and positive".into()));
    }
    match &config.weight {
        WeightSpec::Fixed(w) => {
            if !(w.is_finite() && *w > 0.0) {
                return Err(Error::Validation("weight must be finite and positive".into()));
            }
        }
        WeightSpec::PerIndividual(ws) => {
            if ws.len() != config.n_individuals {
                return Err(Error::DimensionMismatch {
                    context: "weights vs n_individuals",
                    expected: config.n_individuals,
                    got: ws.len(),
                });
            }
            if ws.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                return Err(Error::Validation("weights must be finite and positive".into()));
            }
        }
    }

    let omega_is_zero = config.theta.omega().iter().all(|v| *v == 0.0);
    let chol = if omega_is_zero {
        None
    } else {
        Some(config.theta.omega_chol()?.clone())
    };
    let sigma = config.theta.sigma2().sqrt();
    let mode = config.theta.prior_mode();
    let n_obs = config.times.len();

    let mut records = Vec::with_capacity(config.n_individuals);
    let mut truths = Vec::with_capacity(config.n_individuals);
    for i in 0..config.n_individuals {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, i as u64));
        let phi = match &chol {
            Some(l) => {
                let z = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
                LatentPoint::from_dvector(mode.coords() + l * z)?
            }
            None => mode.clone(),
        };
        let psi = config.theta.psi_from_phi(&phi);
        let weight = match &config.weight {
            WeightSpec::Fixed(w) => *w,
            WeightSpec::PerIndividual(ws) => ws[i],
        };
        let dose = config.dose_per_kg * weight;
        let f = model.predict(&config.times, &psi, dose)?;
        let ys: Vec<f64> = f
            .iter()
            .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        debug_assert_eq!(ys.len(), n_obs);
        records.push(IndividualRecord::new(
            (i + 1).to_string(),
            config.times.clone(),
            ys,
            dose,
        )?);
        truths.push(phi);
    }
    Ok(SimOutput { records, truths })
}

/// Write records as observation rows: `id,time,observation,dose`.
/// Floats print in shortest round-trip form, so reading the file back
/// reproduces them bitwise.
pub fn write_dataset_csv<W: Write>(records: &[IndividualRecord], out: &mut W) -> Result<()> {
    writeln!(out, "id,time,observation,dose")?;
    for record in records {
        for (t, y) in record.times().iter().zip(record.observations()) {
            writeln!(out, "{},{},{},{}", record.id(), t, y, record.dose())?;
        }
    }
    Ok(())
}

/// Latent truths on the natural scale: `id,coordinate,value` with one
/// row per individual and coordinate.
pub fn write_truth_csv<W: Write>(
    sim: &SimOutput,
    theta: &PopulationParams,
    param_names: &[String],
    out: &mut W,
) -> Result<()> {
    if param_names.len() != theta.dim() {
        return Err(Error::DimensionMismatch {
            context: "parameter names vs latent dimension",
            expected: theta.dim(),
            got: param_names.len(),
        });
    }
    writeln!(out, "id,coordinate,value")?;
    for (record, truth) in sim.records.iter().zip(&sim.truths) {
        let psi = theta.psi_from_phi(truth);
        for (name, value) in param_names.iter().zip(&psi) {
            writeln!(out, "{},{},{}", record.id(), name, value)?;
        }
    }
    Ok(())
}

fn parse_field(field: &str, name: &str, line: u64) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Csv {
        line,
        message: format!("{name} is not a number: {field:?}"),
    })
}

/// Read a dataset written by [`write_dataset_csv`], grouping rows into
/// individuals in order of first appearance. Errors carry the 1-based
/// line number of the offending row.
pub fn read_dataset_csv<R: Read>(input: R) -> Result<Vec<IndividualRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    {
        let headers = reader.headers().map_err(|e| Error::Csv {
            line: 1,
            message: e.to_string(),
        })?;
        let expected = ["id", "time", "observation", "dose"];
        let got: Vec<&str> = headers.iter().map(str::trim).collect();
        if got != expected {
            return Err(Error::Csv {
                line: 1,
                message: format!("header must be id,time,observation,dose, got {}", got.join(",")),
            });
        }
    }

    struct Group {
        id: String,
        times: Vec<f64>,
        observations: Vec<f64>,
        dose: f64,
        first_line: u64,
    }
    let mut order: Vec<Group> = Vec::new();
    let mut index: std::collections::HashMap<String, usize> = std::collections::HashMap::new();

    for (row_idx, result) in reader.records().enumerate() {
        let fallback_line = row_idx as u64 + 2;
        let record = result.map_err(|e| Error::Csv {
            line: e.position().map_or(fallback_line, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(fallback_line, |p| p.line());
        if record.len() != 4 {
            return Err(Error::Csv {
                line,
                message: format!("expected 4 fields, got {}", record.len()),
            });
        }
        let id = record[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::Csv {
                line,
                message: "empty id".into(),
            });
        }
        let time = parse_field(&record[1], "time", line)?;
        let observation = parse_field(&record[2], "observation", line)?;
        let dose = parse_field(&record[3], "dose", line)?;
        match index.get(&id) {
            Some(&at) => {
                let group = &mut order[at];
                if group.dose != dose {
                    return Err(Error::Csv {
                        line,
                        message: format!(
                            "individual {id} has inconsistent dose: {} then {dose}",
                            group.dose
                        ),
                    });
                }
                group.times.push(time);
                group.observations.push(observation);
            }
            None => {
                index.insert(id.clone(), order.len());
                order.push(Group {
                    id,
                    times: vec![time],
                    observations: vec![observation],
                    dose,
                    first_line: line,
                });
            }
        }
    }

    if order.is_empty() {
        return Err(Error::Csv {
            line: 1,
            message: "dataset contains no observation rows".into(),
        });
    }
    order
        .into_iter()
        .map(|g| {
            IndividualRecord::new(g.id.clone(), g.times, g.observations, g.dose).map_err(|e| {
                Error::Csv {
                    line: g.first_line,
                    message: format!("individual {}: {e}", g.id),
                }
            })
        })
        .collect()
}
