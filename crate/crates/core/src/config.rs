//! Run configuration: a TOML file with optional sections for the synthetic
//! environment, the Hista and Numca estimators, and the evaluation harness.
//!
//! Every section defaults sensibly, unknown keys are rejected, and the fully
//! resolved configuration (with all defaults and command-line overrides
//! applied) is echoed next to the outputs of every run so results stay
//! attributable to an exact parameterization.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, validation, Result};
use crate::hista::HistaParams;
use crate::numca::MilestonePatterns;
use crate::sveb;
use crate::synth_env::EnvConfig;

/// File name of the resolved-configuration echo written to output dirs.
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

/// Milestone-pattern selection for the Numca estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumcaSection {
    /// Named built-in patterns to scan for; defaults to all of them.
    pub patterns: Vec<String>,
}

impl Default for NumcaSection {
    fn default() -> Self {
        Self {
            patterns: MilestonePatterns::default().names(),
        }
    }
}

/// Evaluation-harness parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvebSection {
    /// States sampled per rollout.
    pub per_rollout: usize,
    /// Continuations per state when a sampled reference or estimator is
    /// requested without an explicit count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_reference: Option<usize>,
    /// Lower difficulty-filter bound on group mean reward (inclusive).
    pub filter_lo: f64,
    /// Upper difficulty-filter bound on group mean reward (inclusive).
    pub filter_hi: f64,
}

impl Default for SvebSection {
    fn default() -> Self {
        Self {
            per_rollout: sveb::DEFAULT_PER_ROLLOUT,
            n_reference: None,
            filter_lo: 0.1,
            filter_hi: 0.8,
        }
    }
}

impl SvebSection {
    /// Validates sampling and filter parameters.
    pub fn validate(&self) -> Result<()> {
        if self.per_rollout == 0 {
            return Err(validation!("sveb.per_rollout must be at least 1"));
        }
        if let Some(n) = self.n_reference {
            if n == 0 {
                return Err(validation!("sveb.n_reference must be at least 1"));
            }
        }
        if !self.filter_lo.is_finite()
            || !self.filter_hi.is_finite()
            || self.filter_lo > self.filter_hi
        {
            return Err(validation!(
                "sveb filter bounds must be finite with filter_lo <= filter_hi, got [{}, {}]",
                self.filter_lo,
                self.filter_hi
            ));
        }
        Ok(())
    }
}

/// Full run configuration. All sections are optional in the file; the
/// resolved form materializes every default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run-wide seed; the `env.seed` key takes precedence if present, and a
    /// `--seed` flag overrides both.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Default output directory; `--out` overrides.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Synthetic-environment parameters; required for simulation and for
    /// exact or sampled references.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub env: Option<EnvConfig>,
    /// Hista estimator parameters.
    pub hista: HistaParams,
    /// Numca estimator parameters.
    pub numca: NumcaSection,
    /// Evaluation-harness parameters.
    pub sveb: SvebSection,
}

impl RunConfig {
    /// Parses a configuration file, rejecting unknown keys.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err!("{}: {e}", path.display()))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| config_err!("{}: {}", path.display(), e.message()))?;
        config.validate()?;
        Ok(config)
    }

    /// Validates every present section.
    pub fn validate(&self) -> Result<()> {
        if let Some(env) = &self.env {
            env.validate()?;
        }
        self.hista.validate()?;
        self.milestone_patterns()?;
        self.sveb.validate()?;
        Ok(())
    }

    /// Seed precedence: command-line override, then `env.seed`, then the
    /// top-level `seed`, then 0.
    pub fn resolve_seed(&self, cli_seed: Option<u64>) -> u64 {
        cli_seed
            .or(self.env.as_ref().and_then(|e| e.seed))
            .or(self.seed)
            .unwrap_or(0)
    }

    /// Applies overrides and writes the resolved seed into every place it is
    /// consumed, so the echoed configuration alone reproduces the run.
    pub fn resolved(mut self, cli_seed: Option<u64>, cli_out: Option<&Path>) -> Self {
        let seed = self.resolve_seed(cli_seed);
        self.seed = Some(seed);
        if let Some(env) = &mut self.env {
            env.seed = Some(seed);
        }
        if let Some(out) = cli_out {
            self.out = Some(out.to_path_buf());
        }
        self
    }

    /// Compiles the configured milestone pattern names.
    pub fn milestone_patterns(&self) -> Result<MilestonePatterns> {
        MilestonePatterns::from_names(&self.numca.patterns)
    }

    /// Serializes the configuration to `config.resolved.toml` in `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| config_err!("cannot serialize resolved config: {e}"))?;
        fs::write(dir.join(RESOLVED_CONFIG_FILE), text)?;
        Ok(())
    }

    /// The environment section, or a configuration error naming the gap.
    pub fn require_env(&self) -> Result<&EnvConfig> {
        self.env
            .as_ref()
            .ok_or_else(|| config_err!("this command needs an [env] section in the config"))
    }
}
