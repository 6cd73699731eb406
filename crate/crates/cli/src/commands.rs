//! The seven pipeline commands. Each one reads its inputs, writes its
//! artifacts under the output layout, echoes the resolved config, and
//! prints one `wrote ...` line per file so scripts can collect paths.

use std::path::Path;

use anyhow::{bail, Context, Result};
use nlme_mcmc::datagen::{simulate, write_dataset_csv, write_truth_csv, SimConfig, WeightSpec};
use nlme_mcmc::diagnostics::{
    acceptance_rate, coordinate_summaries, ess, replicate_summary, running_quantiles,
    write_quantile_csv, CoordinateSummary, ReplicateSummary,
};
use nlme_mcmc::map::{find_map, MapOptions};
use nlme_mcmc::proposal::{laplace_proposal, ProposalExport};
use nlme_mcmc::samplers::run_chain;
use nlme_mcmc::seed::derive_seed;
use nlme_mcmc::{Chain, IndividualRecord, PopulationParams};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::pipeline::{
    adapt, build_kernel, find_individual, load_dataset, map_entry, proposal_options,
    structural_model, write_csv_artifact, write_json, MapEntry, OutputLayout,
};

/// Kernels exercised by `compare`, in output order.
const COMPARE_KINDS: [&str; 4] = ["prior-imh", "rwm-blockwise", "mala", "nlme-imh"];

/// Quantile orders traced by `compare`.
const TRACE_ORDERS: [f64; 3] = [0.1, 0.5, 0.9];

pub fn simulate_cmd(cfg: &Config, out: &OutputLayout) -> Result<()> {
    let model = structural_model(&cfg.model.name)?;
    let theta = cfg.theta()?;
    let sim_config = SimConfig {
        n_individuals: cfg.sim.n_individuals,
        times: cfg.sim.times.clone(),
        theta: theta.clone(),
        dose_per_kg: cfg.sim.dose_per_kg,
        weight: WeightSpec::Fixed(cfg.sim.weight),
        seed: cfg.run.seed,
    };
    let sim = simulate(&sim_config, model.as_ref()).context("simulating the population")?;

    write_csv_artifact(&out.root.join("dataset.csv"), |w| {
        write_dataset_csv(&sim.records, w)
    })?;
    let names = model.param_names();
    write_csv_artifact(&out.root.join("truth.csv"), |w| {
        write_truth_csv(&sim, &theta, &names, w)
    })?;
    println!(
        "simulated {} individuals with {} observations each",
        sim.records.len(),
        cfg.sim.times.len()
    );
    Ok(())
}

pub fn map_cmd(cfg: &Config, out: &OutputLayout, data: &Path) -> Result<()> {
    let model = structural_model(&cfg.model.name)?;
    let theta = cfg.theta()?;
    let records = load_dataset(data)?;
    let entries = records
        .iter()
        .map(|record| {
            let map = find_map(record, &theta, model.as_ref(), None, &MapOptions::default())
                .with_context(|| format!("MAP estimation for individual '{}'", record.id()))?;
            Ok(map_entry(record, &theta, &map))
        })
        .collect::<Result<Vec<MapEntry>>>()?;

    let converged = entries.iter().filter(|e| e.converged).count();
    write_json(&out.summaries.join("map.json"), &entries)?;
    println!("MAP converged for {converged}/{} individuals", entries.len());
    Ok(())
}

#[derive(Serialize)]
struct ProposalReport {
    individual: String,
    map: MapEntry,
    linearized: ProposalExport,
    laplace: ProposalExport,
}

pub fn propose_cmd(cfg: &Config, out: &OutputLayout, data: &Path) -> Result<()> {
    let model = structural_model(&cfg.model.name)?;
    let theta = cfg.theta()?;
    let records = load_dataset(data)?;
    let record = find_individual(&records, &cfg.run.individual)?;

    let adapted = adapt(record, &theta, model.as_ref())?;
    let laplace = laplace_proposal(
        record,
        &theta,
        model.as_ref(),
        &adapted.map,
        &proposal_options(&adapted.map),
    )
    .with_context(|| format!("building the curvature proposal for '{}'", record.id()))?;

    let report = ProposalReport {
        individual: record.id().to_string(),
        map: map_entry(record, &theta, &adapted.map),
        linearized: adapted.proposal.export(),
        laplace: laplace.export(),
    };
    write_json(
        &out.summaries.join(format!("proposal-{}.json", record.id())),
        &report,
    )?;
    Ok(())
}

#[derive(Serialize)]
struct SampleReport {
    kernel: String,
    individual: String,
    seed: u64,
    iterations: usize,
    burn_in: usize,
    acceptance: f64,
    grad_failures: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    ess: Option<Vec<f64>>,
}

pub fn sample_cmd(cfg: &Config, out: &OutputLayout, data: &Path) -> Result<()> {
    let model = structural_model(&cfg.model.name)?;
    let theta = cfg.theta()?;
    let records = load_dataset(data)?;
    let record = find_individual(&records, &cfg.run.individual)?;

    let kind = cfg.kernel.kind.as_str();
    let (kernel, init) = build_kernel(cfg, record, &theta, model.as_ref(), kind)?;
    let chain = run_chain(
        record,
        &theta,
        model.as_ref(),
        &kernel,
        &init,
        cfg.run.iters,
        cfg.run.seed,
    )
    .with_context(|| format!("running the {kind} chain"))?;

    let names = model.param_names();
    write_csv_artifact(
        &out.chains.join(format!("{kind}-{}.csv", record.id())),
        |w| chain.write_csv(&theta, &names, w),
    )?;

    let report = SampleReport {
        kernel: kind.to_string(),
        individual: record.id().to_string(),
        seed: cfg.run.seed,
        iterations: cfg.run.iters,
        burn_in: cfg.run.burn_in,
        acceptance: acceptance_rate(&chain).context("empty chain")?,
        grad_failures: chain.grad_failures,
        ess: ess(&chain, cfg.run.burn_in).ok(),
    };
    write_json(
        &out.summaries
            .join(format!("sample-{kind}-{}.json", record.id())),
        &report,
    )?;
    println!("acceptance rate {}", report.acceptance);
    Ok(())
}

#[derive(Serialize)]
struct CompareReport {
    kernel: String,
    individual: String,
    runs: usize,
    iterations: usize,
    acceptance_mean: f64,
    grad_failures_total: u64,
    reference_iterations: usize,
    reference_burn_in: usize,
    summary: ReplicateSummary,
}

/// Replicates for one kernel, seeded by stream index so the output is
/// independent of scheduling: stream 0 is the reference chain, kernel
/// `k` run `r` uses stream `1 + k*runs + r`.
fn replicate_chains(
    cfg: &Config,
    record: &IndividualRecord,
    theta: &PopulationParams,
    model: &dyn nlme_mcmc::structural::StructuralModel,
    kernel: &nlme_mcmc::KernelConfig,
    init: &nlme_mcmc::LatentPoint,
    kernel_index: usize,
) -> Result<Vec<Chain>> {
    let base = 1 + (kernel_index * cfg.run.runs) as u64;
    let chains = (0..cfg.run.runs)
        .into_par_iter()
        .map(|r| {
            run_chain(
                record,
                theta,
                model,
                kernel,
                init,
                cfg.run.iters,
                derive_seed(cfg.run.seed, base + r as u64),
            )
        })
        .collect::<nlme_mcmc::Result<Vec<Chain>>>()
        .with_context(|| format!("running {} replicates", kernel.name()))?;
    Ok(chains)
}

pub fn compare_cmd(cfg: &Config, out: &OutputLayout, data: &Path) -> Result<()> {
    let model = structural_model(&cfg.model.name)?;
    let theta = cfg.theta()?;
    let records = load_dataset(data)?;
    let record = find_individual(&records, &cfg.run.individual)?;

    let (adapted_kernel, adapted_init) =
        build_kernel(cfg, record, &theta, model.as_ref(), "nlme-imh")?;
    let reference = run_chain(
        record,
        &theta,
        model.as_ref(),
        &adapted_kernel,
        &adapted_init,
        cfg.run.reference_iters,
        derive_seed(cfg.run.seed, 0),
    )
    .context("running the reference chain")?;

    let names = model.param_names();
    let labels: Vec<String> = names.iter().map(|n| format!("phi_{n}")).collect();
    for (k, kind) in COMPARE_KINDS.iter().enumerate() {
        let (kernel, init) = if *kind == "nlme-imh" {
            (adapted_kernel.clone(), adapted_init.clone())
        } else {
            build_kernel(cfg, record, &theta, model.as_ref(), kind)?
        };
        let chains = replicate_chains(cfg, record, &theta, model.as_ref(), &kernel, &init, k)?;

        let trace = running_quantiles(&chains[0], &TRACE_ORDERS, cfg.run.burn_in)
            .with_context(|| format!("quantile trace for {kind}"))?;
        write_csv_artifact(&out.chains.join(format!("quantiles-{kind}.csv")), |w| {
            write_quantile_csv(&trace, &labels, w)
        })?;

        let summary = replicate_summary(
            &chains,
            &cfg.run.thresholds,
            &reference,
            cfg.run.reference_burn_in,
        )
        .with_context(|| format!("summarizing {kind} replicates"))?;
        let acceptance_mean = chains
            .iter()
            .map(|c| acceptance_rate(c).unwrap_or(0.0))
            .sum::<f64>()
            / chains.len() as f64;
        let report = CompareReport {
            kernel: kind.to_string(),
            individual: record.id().to_string(),
            runs: cfg.run.runs,
            iterations: cfg.run.iters,
            acceptance_mean,
            grad_failures_total: chains.iter().map(|c| c.grad_failures).sum(),
            reference_iterations: cfg.run.reference_iters,
            reference_burn_in: cfg.run.reference_burn_in,
            summary,
        };
        write_json(&out.summaries.join(format!("compare-{kind}.json")), &report)?;
        println!("compare {kind}: mean acceptance {acceptance_mean}");
    }
    Ok(())
}

#[derive(Serialize)]
struct ReferenceReport {
    kernel: String,
    individual: String,
    seed: u64,
    iterations: usize,
    burn_in: usize,
    acceptance: f64,
    /// Five-number summaries per latent coordinate.
    phi: Vec<CoordinateSummary>,
    /// The same summaries mapped to the natural scale.
    psi: Vec<CoordinateSummary>,
}

pub fn reference_cmd(cfg: &Config, out: &OutputLayout, data: &Path) -> Result<()> {
    let model = structural_model(&cfg.model.name)?;
    let theta = cfg.theta()?;
    let records = load_dataset(data)?;
    let record = find_individual(&records, &cfg.run.individual)?;

    let (kernel, init) = build_kernel(cfg, record, &theta, model.as_ref(), "nlme-imh")?;
    let seed = derive_seed(cfg.run.seed, 0);
    let chain = run_chain(
        record,
        &theta,
        model.as_ref(),
        &kernel,
        &init,
        cfg.run.reference_iters,
        seed,
    )
    .context("running the reference chain")?;

    let names = model.param_names();
    write_csv_artifact(
        &out.chains.join(format!("reference-{}.csv", record.id())),
        |w| chain.write_csv(&theta, &names, w),
    )?;

    let phi = coordinate_summaries(&chain, cfg.run.reference_burn_in)
        .context("summarizing the reference chain")?;
    // Coordinatewise monotone transforms commute with quantiles, so the
    // natural-scale summary is the transformed latent summary.
    let psi = phi
        .iter()
        .zip(theta.transforms())
        .map(|(s, t)| CoordinateSummary {
            min: t.from_latent(s.min),
            q1: t.from_latent(s.q1),
            median: t.from_latent(s.median),
            q3: t.from_latent(s.q3),
            max: t.from_latent(s.max),
        })
        .collect();
    let report = ReferenceReport {
        kernel: "nlme-imh".to_string(),
        individual: record.id().to_string(),
        seed,
        iterations: cfg.run.reference_iters,
        burn_in: cfg.run.reference_burn_in,
        acceptance: acceptance_rate(&chain).context("empty chain")?,
        phi,
        psi,
    };
    write_json(
        &out.summaries
            .join(format!("reference-{}.json", record.id())),
        &report,
    )?;
    println!("reference acceptance rate {}", report.acceptance);
    Ok(())
}

#[derive(Serialize)]
struct InfoGapFile {
    individual: String,
    map: MapEntry,
    n_sims: usize,
    /// Relative Frobenius gap between the simulation-averaged curvature
    /// and its zero-residual limit.
    gap: f64,
    std_error: f64,
    within_three_standard_errors: bool,
}

pub fn info_gap_cmd(cfg: &Config, out: &OutputLayout, data: &Path) -> Result<()> {
    let model = structural_model(&cfg.model.name)?;
    let theta = cfg.theta()?;
    let records = load_dataset(data)?;
    let record = find_individual(&records, &cfg.run.individual)?;

    let map = find_map(record, &theta, model.as_ref(), None, &MapOptions::default())
        .with_context(|| format!("MAP estimation for individual '{}'", record.id()))?;
    if !proposal_options(&map).allow_unconverged {
        bail!(
            "MAP for individual '{}' did not converge (gradient norm {} after {} iterations); the curvature check needs a mode",
            record.id(),
            map.grad_norm,
            map.iterations
        );
    }
    let gap = nlme_mcmc::proposal::expected_info_gap(
        record,
        &theta,
        model.as_ref(),
        &map.phi_hat,
        cfg.run.info_sims,
        cfg.run.seed,
    )
    .context("estimating the expected-information gap")?;

    let report = InfoGapFile {
        individual: record.id().to_string(),
        map: map_entry(record, &theta, &map),
        n_sims: gap.n_sims,
        gap: gap.gap,
        std_error: gap.std_error,
        within_three_standard_errors: gap.gap < 3.0 * gap.std_error,
    };
    write_json(
        &out.summaries
            .join(format!("info-gap-{}.json", record.id())),
        &report,
    )?;
    println!(
        "relative curvature gap {} (standard error {})",
        report.gap, report.std_error
    );
    Ok(())
}
