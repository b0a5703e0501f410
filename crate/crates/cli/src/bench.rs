use crate::config::{ExperimentConfig, OutputFormat};
use crate::error::{invalid, Result};
use crate::{load_pair, time_it, write_json, TimingStats};
use hosm_core::models::{ModelConfig, ScoreModelPair, SecondOrderMode};
use hosm_core::rng::{standard_normal_matrix, stream};
use hosm_core::Matrix;
use serde::{Deserialize, Serialize};
use std::hint::black_box;
use std::io::Write;
use std::path::Path;

pub const BENCH_JSON: &str = "bench.json";
pub const BENCH_CSV: &str = "bench.csv";
const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub dim: usize,
    pub rank: usize,
    pub hidden_s1: usize,
    pub hidden_s2: usize,
    pub params_s1: usize,
    pub params_s2: usize,
    pub batch_size: usize,
    /// One forward pass of the second-order model, giving `α` and `β`.
    pub direct: TimingStats,
    /// The same followed by expansion to dense `D x D` matrices.
    pub direct_dense: TimingStats,
    /// `D + 1` forward passes of the first-order model assembled into a
    /// forward-difference Jacobian.
    pub finite_difference: TimingStats,
    pub ratio: f64,
    pub ratio_dense: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

fn mlp_params(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn sizes(input: usize, hidden: usize, output: usize, layers: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend(std::iter::repeat_n(hidden, layers - 1));
    s.push(output);
    s
}

/// Largest hidden width whose α and β networks together have no more
/// parameters than the first-order network.
pub fn matched_hidden(dim: usize, rank: usize, model: &ModelConfig) -> usize {
    let budget = mlp_params(&sizes(dim, model.hidden_s1, dim, model.layers));
    let cost = |h: usize| mlp_params(&sizes(dim, h, dim, model.layers)) + mlp_params(&sizes(dim, h, dim * rank, model.layers));
    let mut h = 1;
    while cost(h + 1) <= budget {
        h += 1;
    }
    h
}

fn fd_jacobian(pair: &ScoreModelPair, x: &Matrix) -> Result<Matrix> {
    let d = x.cols();
    let base = pair.first.eval_batch(x)?;
    let mut jac = Matrix::zeros(x.rows(), d * d);
    for j in 0..d {
        let mut xp = x.clone();
        for n in 0..x.rows() {
            xp.row_mut(n)[j] += FD_STEP;
        }
        let up = pair.first.eval_batch(&xp)?;
        for n in 0..x.rows() {
            let (u, b, o) = (up.row(n), base.row(n), jac.row_mut(n));
            for i in 0..d {
                o[i * d + j] = (u[i] - b[i]) / FD_STEP;
            }
        }
    }
    Ok(jac)
}

fn bench_pair(pair: &ScoreModelPair, batch: usize, repeats: usize, seed: u64) -> Result<BenchRow> {
    if pair.second.mode() != SecondOrderMode::Full {
        return Err(invalid("bench needs a full-mode second-order model"));
    }
    let d = pair.dim();
    let x = standard_normal_matrix(&mut stream(seed, 5), batch, d);
    let direct = time_it(repeats, || {
        black_box(pair.second.eval_factors_batch(&x)?);
        Ok(())
    })?;
    let direct_dense = time_it(repeats, || {
        black_box(pair.second.eval_batch(&x)?);
        Ok(())
    })?;
    let finite_difference = time_it(repeats, || {
        black_box(fd_jacobian(pair, &x)?);
        Ok(())
    })?;
    let alpha = pair.second.alpha_net();
    let params_s2 = alpha.num_params() + pair.second.beta_net().map_or(0, |b| b.num_params());
    Ok(BenchRow {
        dim: d,
        rank: pair.second.rank(),
        hidden_s1: pair.first.net.sizes().get(1).copied().unwrap_or(0),
        hidden_s2: alpha.sizes().get(1).copied().unwrap_or(0),
        params_s1: pair.first.net.num_params(),
        params_s2,
        batch_size: batch,
        ratio: finite_difference.median_us / direct.median_us,
        ratio_dense: finite_difference.median_us / direct_dense.median_us,
        direct,
        direct_dense,
        finite_difference,
    })
}

/// Times direct second-order evaluation against the finite-difference
/// Jacobian of the first-order model. Timings are medians over
/// `bench.repeats` runs after one warm-up run. Weights do not affect cost, so
/// without a checkpoint freshly initialized pairs are used for each of
/// `bench.dims`.
pub fn cmd_bench(cfg: &ExperimentConfig, out: &Path) -> Result<BenchReport> {
    let b = &cfg.bench;
    let mut rows = Vec::new();
    if b.checkpoint.is_some() {
        let pair = load_pair(cfg, &b.checkpoint)?;
        rows.push(bench_pair(&pair, b.batch_size, b.repeats, cfg.seed)?);
    } else {
        for &d in &b.dims {
            let rank = b.rank.min(d);
            let hidden_s2 = if b.match_params { matched_hidden(d, rank, &cfg.model) } else { cfg.model.hidden_s2 };
            let model = ModelConfig {
                rank: Some(rank),
                hidden_s2,
                mode: SecondOrderMode::Full,
                ..cfg.model.clone()
            };
            let pair = ScoreModelPair::init(d, &model, cfg.train.sigma, cfg.seed)?;
            rows.push(bench_pair(&pair, b.batch_size, b.repeats, cfg.seed)?);
        }
    }
    let report = BenchReport { rows };
    match cfg.format {
        OutputFormat::Json => write_json(&out.join(BENCH_JSON), &report)?,
        OutputFormat::Csv => write_bench_csv(&report, std::fs::File::create(out.join(BENCH_CSV))?)?,
    }
    Ok(report)
}

pub const BENCH_CSV_HEADER: &str = "dim,rank,hidden_s1,hidden_s2,params_s1,params_s2,batch_size,\
direct_median_us,direct_min_us,direct_max_us,dense_median_us,dense_min_us,dense_max_us,\
fd_median_us,fd_min_us,fd_max_us,repeats,ratio,ratio_dense";

pub fn write_bench_csv<W: Write>(report: &BenchReport, mut w: W) -> Result<()> {
    writeln!(w, "{BENCH_CSV_HEADER}")?;
    for r in &report.rows {
        let t = |s: &TimingStats| format!("{},{},{}", s.median_us, s.min_us, s.max_us);
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.dim,
            r.rank,
            r.hidden_s1,
            r.hidden_s2,
            r.params_s1,
            r.params_s2,
            r.batch_size,
            t(&r.direct),
            t(&r.direct_dense),
            t(&r.finite_difference),
            r.direct.repeats,
            r.ratio,
            r.ratio_dense
        )?;
    }
    Ok(())
}
