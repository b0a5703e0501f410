use crate::config::{ExperimentConfig, ScoreSourceKind};
use crate::error::{invalid, CliError, Result};
use crate::{load_pair, write_json};
use hosm_core::samplers::{
    mode_crossings, run_chains, tune_step_size, write_trajectory_csv, EssReport, Method, SamplerConfig, ScoreSource,
    TuneResult, VarianceGuard,
};
use hosm_core::Error;
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Write};
use std::path::Path;

pub const SAMPLE_JSON: &str = "sample.json";
pub const ESS_JSON: &str = "ess.json";
pub const TRAJECTORY_CSV: &str = "trajectory.csv";
pub const DIVERGENCE_JSON: &str = "divergence.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub method: Method,
    pub step_size: f64,
    pub iterations: usize,
    pub burn_in: usize,
    pub chains: usize,
    pub clamp_events: usize,
    pub ess: Option<EssReport>,
    /// Per-chain nearest-mode label changes when `sample.modes` is set.
    pub mode_crossings: Option<Vec<usize>>,
    pub mean: Option<Vec<f64>>,
    pub variance: Option<Vec<f64>>,
    pub tune: Option<TuneResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub step: usize,
    pub chain: usize,
    pub last_finite: Vec<f64>,
    pub step_size: f64,
}

/// Runs the configured sampler, after an optional step-size search. Pilots
/// use seed `seed + 1` and the variance guard draws its reference from the
/// configured distribution. Writes `sample.json`, `ess.json` and
/// `trajectory.csv`; on divergence writes `divergence.json` and fails with
/// exit code 2.
pub fn cmd_sample(cfg: &ExperimentConfig, out: &Path) -> Result<SampleReport> {
    let dist = cfg.distribution.build()?;
    let pair;
    let source: &dyn ScoreSource = match cfg.sample.source {
        ScoreSourceKind::Oracle => &dist,
        ScoreSourceKind::Checkpoint => {
            pair = load_pair(cfg, &cfg.sample.checkpoint)?;
            if pair.dim() != dist.dim() {
                return Err(invalid(format!("checkpoint dim {} does not match distribution dim {}", pair.dim(), dist.dim())));
            }
            &pair
        }
    };
    let mut sc = cfg.sampler.clone();
    let tune = match &cfg.sample.tune {
        Some(t) => {
            let guard = t
                .guard_tolerance
                .map(|tol| VarianceGuard::from_distribution(&dist, t.guard_draws, cfg.seed, tol))
                .transpose()?;
            let pilot = SamplerConfig {
                iterations: t.pilot_iterations,
                burn_in: t.pilot_burn_in,
                seed: cfg.seed.wrapping_add(1),
                ..sc.clone()
            };
            let r = tune_step_size(&pilot, &t.grid, source, Some(&dist), guard.as_ref())?;
            sc.step_size = r.best;
            Some(r)
        }
        None => None,
    };
    let run = match run_chains(&sc, source, Some(&dist)) {
        Ok(r) => r,
        Err(Error::Divergence { step, chain, last_finite }) => {
            let report = DivergenceReport {
                step,
                chain,
                last_finite,
                step_size: sc.step_size,
            };
            write_json(&out.join(DIVERGENCE_JSON), &report)?;
            return Err(CliError::Diverged(format!(
                "chain {chain} diverged at step {step}; last finite state in {DIVERGENCE_JSON}"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let crossings = match &cfg.sample.modes {
        Some(m) if sc.record => Some(mode_crossings(&run.state, m)?),
        _ => None,
    };
    let (mean, variance) = run.state.moments().unzip();
    if let Some(ess) = &run.ess {
        write_json(&out.join(ESS_JSON), ess)?;
    }
    if sc.record && !cfg.sample.no_trajectory {
        let mut w = BufWriter::new(std::fs::File::create(out.join(TRAJECTORY_CSV))?);
        write_trajectory_csv(&run.state, sc.burn_in, &mut w)?;
        w.flush()?;
    }
    let report = SampleReport {
        method: sc.method,
        step_size: sc.step_size,
        iterations: sc.iterations,
        burn_in: sc.burn_in,
        chains: sc.chains,
        clamp_events: run.state.clamp_events,
        ess: run.ess,
        mode_crossings: crossings,
        mean,
        variance,
        tune,
    };
    write_json(&out.join(SAMPLE_JSON), &report)?;
    Ok(report)
}
