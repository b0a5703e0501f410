use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use hosm_core::models::ScoreModelPair;
use hosm_core::objectives::{train, write_train_log, TrainOutcome};
use std::fs;
use std::io::BufWriter;
use std::path::Path;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.csv";

/// Trains a fresh pair and writes `checkpoint/` and `train_log.csv`. On a
/// non-finite loss both are still written, the checkpoint holding the last
/// finite parameters, and the error maps to exit code 2.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<(ScoreModelPair, TrainOutcome)> {
    let dist = cfg.distribution.build()?;
    let mut pair = ScoreModelPair::init(dist.dim(), &cfg.model, cfg.train.sigma, cfg.seed)?;
    let outcome = train(&mut pair, &dist, &cfg.train)?;
    fs::create_dir_all(out)?;
    pair.save(&out.join(CHECKPOINT_DIR))?;
    write_train_log(&outcome.log, BufWriter::new(fs::File::create(out.join(TRAIN_LOG))?))?;
    if let Some(step) = outcome.diverged_at {
        return Err(CliError::Diverged(format!(
            "loss became non-finite at step {step}; checkpoint holds the parameters from before it"
        )));
    }
    Ok((pair, outcome))
}
