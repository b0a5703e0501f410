//! The `hosm` experiment harness. Each `cmd_*` function reads an
//! [`ExperimentConfig`], writes its outputs under a directory and returns
//! the in-memory report.

pub mod bench;
pub mod config;
pub mod denoise;
pub mod error;
pub mod eval;
pub mod sample;
pub mod train;

pub use bench::{cmd_bench, BenchReport, BenchRow};
pub use config::ExperimentConfig;
pub use denoise::cmd_denoise;
pub use error::{CliError, Result};
pub use eval::{cmd_eval, EvalReport, EvalRow, EvalTiming};
pub use sample::{cmd_sample, SampleReport};
pub use train::cmd_train;

use hosm_core::models::ScoreModelPair;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

/// Wall-clock summary in microseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub median_us: f64,
    pub min_us: f64,
    pub max_us: f64,
    pub repeats: usize,
}

/// Runs `f` once to warm up, then `repeats` timed runs.
pub(crate) fn time_it(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<TimingStats> {
    f()?;
    let mut t = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        t.push(start.elapsed().as_secs_f64() * 1e6);
    }
    t.sort_by(f64::total_cmp);
    let n = t.len();
    let median = if n % 2 == 1 { t[n / 2] } else { 0.5 * (t[n / 2 - 1] + t[n / 2]) };
    Ok(TimingStats {
        median_us: median,
        min_us: t[0],
        max_us: t[n - 1],
        repeats,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(fs::File::open(path)?))?)
}

pub(crate) fn load_pair(cfg: &ExperimentConfig, p: &Option<std::path::PathBuf>) -> Result<ScoreModelPair> {
    let dir = cfg.existing(p, "checkpoint")?;
    Ok(ScoreModelPair::load(&dir)?)
}

/// Dispatches a subcommand name to its `cmd_*` function.
pub fn run(command: &str, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    match command {
        "train" => cmd_train(cfg, out).map(drop),
        "eval" => cmd_eval(cfg, out).map(drop),
        "bench" => cmd_bench(cfg, out).map(drop),
        "sample" => cmd_sample(cfg, out).map(drop),
        "denoise" => cmd_denoise(cfg, out).map(drop),
        other => Err(error::CliError::Invalid(format!("unknown command {other}"))),
    }
}
