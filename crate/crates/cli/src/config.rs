//! Run configuration: a TOML document with flat sections, merged with
//! command-line overrides.
//!
//! Every command echoes its resolved configuration to
//! `config-echo.toml` in the output directory. The echo parses back
//! into the same [`Config`], so any artifact directory doubles as a
//! replayable pipeline input.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use nlme_mcmc::datagen::default_times;
use nlme_mcmc::model::Transform;
use nlme_mcmc::PopulationParams;
use serde::{Deserialize, Serialize};

/// Kernel kinds accepted by `--kernel` and `[kernel] kind`.
pub const KERNEL_KINDS: [&str; 5] = [
    "prior-imh",
    "rwm-componentwise",
    "rwm-blockwise",
    "mala",
    "nlme-imh",
];

/// Master seed used when neither the config nor `--seed` provides one.
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelSection,
    pub theta: ThetaSection,
    pub sim: SimSection,
    pub kernel: KernelSection,
    pub run: RunSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            theta: ThetaSection::default(),
            sim: SimSection::default(),
            kernel: KernelSection::default(),
            run: RunSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Structural model name from the built-in registry.
    pub name: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            name: "pk1-oral".into(),
        }
    }
}

/// Population parameters. The covariance is diagonal here; full
/// matrices are a library-level feature.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThetaSection {
    pub psi_pop: Vec<f64>,
    /// Per-coordinate prior standard deviations on the latent scale.
    pub omega_sd: Vec<f64>,
    pub sigma2: f64,
    /// Per-coordinate latent transform: "log" or "identity".
    pub transform: Vec<Transform>,
}

impl Default for ThetaSection {
    fn default() -> Self {
        Self {
            psi_pop: vec![1.0, 8.0, 0.01],
            omega_sd: vec![0.5, 0.2, 0.3],
            sigma2: 0.5,
            transform: vec![Transform::Log; 3],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub n_individuals: usize,
    /// Observation time grid in hours.
    pub times: Vec<f64>,
    pub dose_per_kg: f64,
    /// Body weight in kilograms, shared by every simulated individual.
    pub weight: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            n_individuals: 32,
            times: default_times(),
            dose_per_kg: 1.5,
            weight: 70.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    /// One of [`KERNEL_KINDS`].
    pub kind: String,
    /// Blockwise walk scale; defaults to 2.4/sqrt(p).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    /// Componentwise walk scales; default to 0.4 times each prior
    /// standard deviation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<f64>>,
    /// Langevin drift scale; defaults to 1e-2.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            kind: "nlme-imh".into(),
            step: None,
            steps: None,
            gamma: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Master seed; all per-chain and per-individual streams derive
    /// from it.
    pub seed: u64,
    /// Iterations per sampled or replicated chain.
    pub iters: usize,
    /// Replicate chains per kernel in `compare`.
    pub runs: usize,
    /// States discarded before diagnostics on short chains.
    pub burn_in: usize,
    /// Individual id analyzed by single-individual commands.
    pub individual: String,
    /// Iteration checkpoints summarized by `compare`.
    pub thresholds: Vec<usize>,
    /// Length of the long reference chain.
    pub reference_iters: usize,
    /// States discarded from the reference chain.
    pub reference_burn_in: usize,
    /// Simulated datasets for the expected-information check.
    pub info_sims: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            iters: 500,
            runs: 100,
            burn_in: 0,
            individual: "1".into(),
            thresholds: vec![50, 200, 500],
            reference_iters: 100_000,
            reference_burn_in: 10_000,
            info_sims: 10_000,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub kernel: Option<String>,
    pub iters: Option<usize>,
    pub runs: Option<usize>,
    pub individual: Option<String>,
    pub burn_in: Option<usize>,
}

impl Config {
    /// Read a config file, or start from the built-in defaults when no
    /// path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        // The TOML error rendering spans multiple lines; keep the
        // message, drop the snippet, and fold any remaining line breaks
        // so stderr stays one line.
        toml::from_str(&text).map_err(|e| {
            let message = e.message().lines().collect::<Vec<_>>().join("; ");
            anyhow!("parsing config {}: {message}", path.display())
        })
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.run.seed = seed;
        }
        if let Some(kernel) = &overrides.kernel {
            self.kernel.kind = kernel.clone();
        }
        if let Some(iters) = overrides.iters {
            self.run.iters = iters;
        }
        if let Some(runs) = overrides.runs {
            self.run.runs = runs;
        }
        if let Some(individual) = &overrides.individual {
            self.run.individual = individual.clone();
        }
        if let Some(burn_in) = overrides.burn_in {
            self.run.burn_in = burn_in;
        }
    }

    /// Front-load the checks whose failure modes would otherwise
    /// surface deep inside a command.
    pub fn validate(&self) -> Result<()> {
        if !KERNEL_KINDS.contains(&self.kernel.kind.as_str()) {
            bail!(
                "unknown kernel '{}'; valid kinds are {}",
                self.kernel.kind,
                KERNEL_KINDS.join(", ")
            );
        }
        if self.run.iters == 0 {
            bail!("iters must be at least 1");
        }
        if self.run.runs == 0 {
            bail!("runs must be at least 1");
        }
        if self.run.info_sims < 2 {
            bail!("info_sims must be at least 2 to estimate a standard error");
        }
        Ok(())
    }

    pub fn theta(&self) -> Result<PopulationParams> {
        PopulationParams::with_diagonal_sd(
            self.theta.psi_pop.clone(),
            &self.theta.omega_sd,
            self.theta.sigma2,
            self.theta.transform.clone(),
        )
        .context("building population parameters")
    }

    /// Write the resolved configuration next to the other artifacts.
    pub fn echo(&self, out_dir: &Path) -> Result<std::path::PathBuf> {
        let path = out_dir.join("config-echo.toml");
        let text = toml::to_string_pretty(self).context("serializing config echo")?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_a_toml_fixed_point() {
        let cfg = Config::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(toml::to_string_pretty(&back).unwrap(), text);
    }

    #[test]
    fn flags_override_every_config_field_they_cover() {
        let mut cfg = Config::default();
        cfg.apply(&Overrides {
            seed: Some(7),
            kernel: Some("mala".into()),
            iters: Some(50),
            runs: Some(3),
            individual: Some("9".into()),
            burn_in: Some(10),
        });
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.kernel.kind, "mala");
        assert_eq!(cfg.run.iters, 50);
        assert_eq!(cfg.run.runs, 3);
        assert_eq!(cfg.run.individual, "9");
        assert_eq!(cfg.run.burn_in, 10);
    }

    #[test]
    fn empty_overrides_change_nothing() {
        let mut cfg = Config::default();
        let before = toml::to_string_pretty(&cfg).unwrap();
        cfg.apply(&Overrides::default());
        assert_eq!(toml::to_string_pretty(&cfg).unwrap(), before);
    }

    #[test]
    fn unknown_kernel_kind_fails_validation_naming_the_kinds() {
        let mut cfg = Config::default();
        cfg.kernel.kind = "gibbs".into();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("gibbs"), "{err}");
        for kind in KERNEL_KINDS {
            assert!(err.contains(kind), "{err} should list {kind}");
        }
    }

    #[test]
    fn mismatched_theta_lengths_are_rejected() {
        let mut cfg = Config::default();
        cfg.theta.omega_sd = vec![0.5, 0.2];
        assert!(cfg.theta().is_err());
    }

    #[test]
    fn partial_config_files_fill_in_defaults() {
        let cfg: Config = toml::from_str("[run]\niters = 33\n").unwrap();
        assert_eq!(cfg.run.iters, 33);
        assert_eq!(cfg.run.seed, DEFAULT_SEED);
        assert_eq!(cfg.kernel.kind, "nlme-imh");
        assert_eq!(cfg.sim.n_individuals, 32);
    }
}
