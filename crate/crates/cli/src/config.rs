//! Experiment configuration, read from TOML.
//!
//! Every stochastic stage takes its seed from the top-level `seed`, which
//! `--seed` overrides. Relative paths are resolved against the directory of
//! the config file.

use crate::error::{invalid, Result};
use hosm_core::distributions::DistributionSpec;
use hosm_core::models::ModelConfig;
use hosm_core::objectives::TrainConfig;
use hosm_core::samplers::SamplerConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

/// Where scores come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSourceKind {
    /// Analytic scores of the configured distribution.
    #[default]
    Oracle,
    Checkpoint,
}

/// Which analytic second-order score evaluation compares against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Truth {
    /// The noisy density when it has closed-form scores, else the clean one.
    #[default]
    Auto,
    Noisy,
    Clean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub test_points: usize,
    /// Independent training runs, seeded `seed, seed + 1, ...`.
    pub seeds: usize,
    /// Evaluate this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
    /// Use the analytic scores as the "model".
    pub oracle: bool,
    pub truth: Truth,
    /// Central-difference step of the baseline Jacobian.
    pub fd_step: f64,
    pub timing_repeats: usize,
    /// Flag runs whose direct second-order MSE exceeds this.
    pub mse_tolerance: Option<f64>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            test_points: 1000,
            seeds: 1,
            checkpoint: None,
            oracle: false,
            truth: Truth::Auto,
            fd_step: 1e-4,
            timing_repeats: 7,
            mse_tolerance: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub dims: Vec<usize>,
    pub rank: usize,
    pub batch_size: usize,
    pub repeats: usize,
    /// Size the α and β networks to about the first-order parameter count.
    pub match_params: bool,
    /// Time this checkpoint instead of fresh models.
    pub checkpoint: Option<PathBuf>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            dims: vec![10, 50, 100],
            rank: 20,
            batch_size: 64,
            repeats: 7,
            match_params: true,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSpec {
    pub grid: Vec<f64>,
    pub pilot_iterations: usize,
    pub pilot_burn_in: usize,
    /// Reject pilots whose per-dimension variance is off by more than this
    /// relative amount.
    #[serde(default)]
    pub guard_tolerance: Option<f64>,
    #[serde(default = "default_guard_draws")]
    pub guard_draws: usize,
}

fn default_guard_draws() -> usize {
    100_000
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSpec {
    pub source: ScoreSourceKind,
    pub checkpoint: Option<PathBuf>,
    pub tune: Option<TuneSpec>,
    /// Centers for counting mode crossings.
    pub modes: Option<Vec<Vec<f64>>>,
    /// Skip the trajectory CSV.
    pub no_trajectory: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseSpec {
    pub input: Option<PathBuf>,
    pub sigma: Option<f64>,
    pub top_k: usize,
    pub source: ScoreSourceKind,
    pub checkpoint: Option<PathBuf>,
    /// Posterior samples per point.
    pub samples: usize,
}

impl Default for DenoiseSpec {
    fn default() -> Self {
        Self {
            input: None,
            sigma: None,
            top_k: 2,
            source: ScoreSourceKind::Oracle,
            checkpoint: None,
            samples: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub format: OutputFormat,
    pub distribution: DistributionSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub sample: SampleSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub bench: BenchSpec,
    #[serde(default)]
    pub denoise: DenoiseSpec,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e| invalid(format!("config: {e}")))?;
        for section in ["train", "sampler"] {
            if raw.get(section).and_then(|v| v.as_table()).is_some_and(|t| t.contains_key("seed")) {
                return Err(invalid(format!("config: [{section}] must not set a seed; use the top-level seed")));
            }
        }
        let mut cfg: Self = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.sampler.seed = seed;
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    /// An existing file or directory named by the config.
    pub fn existing(&self, p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        let p = p.as_ref().ok_or_else(|| invalid(format!("config: {what} is required")))?;
        let full = self.resolve(p);
        if !full.exists() {
            return Err(invalid(format!("{what} {} does not exist", full.display())));
        }
        Ok(full)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sampler.validate()?;
        let e = &self.eval;
        if e.seeds == 0 {
            return Err(invalid("eval.seeds must be at least 1"));
        }
        if e.checkpoint.is_some() && (e.seeds != 1 || e.oracle) {
            return Err(invalid("eval.checkpoint excludes eval.oracle and more than one seed"));
        }
        if !(e.fd_step > 0.0) || !e.fd_step.is_finite() {
            return Err(invalid("eval.fd_step must be positive"));
        }
        if e.timing_repeats < 7 {
            return Err(invalid("eval.timing_repeats must be at least 7"));
        }
        let b = &self.bench;
        if b.repeats < 7 {
            return Err(invalid("bench.repeats must be at least 7"));
        }
        if b.rank == 0 || b.batch_size == 0 || b.dims.iter().any(|&d| d == 0) {
            return Err(invalid("bench dims, rank and batch_size must be positive"));
        }
        if let Some(t) = &self.sample.tune {
            if t.grid.is_empty() || t.pilot_burn_in >= t.pilot_iterations {
                return Err(invalid("sample.tune needs a grid and pilot_burn_in below pilot_iterations"));
            }
        }
        if let Some(s) = self.denoise.sigma {
            if !(s > 0.0) || !s.is_finite() {
                return Err(invalid("denoise.sigma must be positive"));
            }
        }
        if self.denoise.top_k == 0 {
            return Err(invalid("denoise.top_k must be at least 1"));
        }
        Ok(())
    }
}
