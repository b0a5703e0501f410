use crate::config::{ExperimentConfig, OutputFormat, Truth};
use crate::error::{invalid, CliError, Result};
use crate::{load_pair, time_it, write_json, TimingStats};
use hosm_core::distributions::{perturb_with, Distribution};
use hosm_core::models::{ScoreModelPair, SecondOrderMode};
use hosm_core::objectives::train;
use hosm_core::rng::{standard_normal_matrix, stream};
use hosm_core::Matrix;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_TIMING: &str = "eval_timing.json";
pub const EVAL_CSV_HEADER: &str = "seed,s1_mse,s2_direct_mse,s2_direct_diag_mse,s2_fd_mse,s2_fd_diag_mse";

/// Per-entry mean squared errors against the analytic scores. The full
/// matrix error is absent for diagonal-only models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub seed: u64,
    pub s1_mse: f64,
    pub s2_direct_mse: Option<f64>,
    pub s2_direct_diag_mse: f64,
    /// Central-difference Jacobian of the first-order model.
    pub s2_fd_mse: f64,
    pub s2_fd_diag_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `"noisy"` or `"clean"`.
    pub truth: String,
    pub sigma: f64,
    pub test_points: usize,
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
    /// Sample standard deviation over seeds; zero for a single seed.
    pub std: EvalRow,
    pub within_tolerance: Option<bool>,
}

/// Wall-clock cost of producing second-order scores at the test points.
/// Kept apart from [`EvalReport`] so that the report is reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTiming {
    pub direct: TimingStats,
    pub finite_difference: TimingStats,
}

enum Estimator<'a> {
    Model(&'a ScoreModelPair),
    Oracle(&'a Distribution),
}

impl Estimator<'_> {
    fn s1(&self, x: &Matrix) -> Result<Matrix> {
        Ok(match self {
            Self::Model(p) => p.first.eval_batch(x)?,
            Self::Oracle(d) => rows(x, |r| d.s1(r))?,
        })
    }

    /// Full `D x D` blocks when available, else the diagonal.
    fn s2(&self, x: &Matrix) -> Result<(Option<Matrix>, Matrix)> {
        match self {
            Self::Model(p) if p.second.mode() == SecondOrderMode::DiagOnly => Ok((None, p.second.eval_diag_batch(x)?)),
            Self::Model(p) => {
                let full = p.second.eval_batch(x)?;
                Ok((Some(full.clone()), diagonals(&full, x.cols())?))
            }
            Self::Oracle(d) => {
                let full = rows(x, |r| Ok(d.s2(r)?.into_vec()))?;
                Ok((Some(full.clone()), diagonals(&full, x.cols())?))
            }
        }
    }

    /// `J[n][i * D + j] = ∂s₁ᵢ/∂xⱼ` by central differences.
    fn fd_jacobian(&self, x: &Matrix, h: f64) -> Result<Matrix> {
        let d = x.cols();
        let mut jac = Matrix::zeros(x.rows(), d * d);
        for j in 0..d {
            let mut up = x.clone();
            let mut down = x.clone();
            for n in 0..x.rows() {
                up.row_mut(n)[j] += h;
                down.row_mut(n)[j] -= h;
            }
            let (su, sd) = (self.s1(&up)?, self.s1(&down)?);
            for n in 0..x.rows() {
                for i in 0..d {
                    jac.row_mut(n)[i * d + j] = (su.row(n)[i] - sd.row(n)[i]) / (2.0 * h);
                }
            }
        }
        Ok(jac)
    }
}

fn rows(x: &Matrix, f: impl Fn(&[f64]) -> hosm_core::Result<Vec<f64>>) -> Result<Matrix> {
    let data: hosm_core::Result<Vec<Vec<f64>>> = x.row_iter().map(f).collect();
    let data = data?;
    let cols = data.first().map_or(0, Vec::len);
    Ok(Matrix::from_vec(data.len(), cols, data.concat())?)
}

fn diagonals(full: &Matrix, d: usize) -> Result<Matrix> {
    rows(full, |r| Ok((0..d).map(|i| r[i * d + i]).collect()))
}

fn mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(a.sub(b)?.frobenius_sq() / a.len().max(1) as f64)
}

fn test_points(dist: &Distribution, n: usize, sigma: f64, seed: u64) -> Result<Matrix> {
    let mut rng = stream(seed, 4);
    let clean = dist.sample(n, &mut rng)?;
    let z = standard_normal_matrix(&mut rng, clean.rows(), clean.cols());
    let noisy: Vec<Vec<f64>> = clean.row_iter().zip(z.row_iter()).map(|(x, z)| perturb_with(x, z, sigma)).collect();
    Ok(Matrix::from_vec(n, dist.dim(), noisy.concat())?)
}

fn evaluate(est: &Estimator, truth: &Distribution, x: &Matrix, h: f64, seed: u64) -> Result<EvalRow> {
    let d = x.cols();
    let t1 = rows(x, |r| truth.s1(r))?;
    let t2 = rows(x, |r| Ok(truth.s2(r)?.into_vec()))?;
    let t2d = diagonals(&t2, d)?;
    let (full, diag) = est.s2(x)?;
    let fd = est.fd_jacobian(x, h)?;
    Ok(EvalRow {
        seed,
        s1_mse: mse(&est.s1(x)?, &t1)?,
        s2_direct_mse: full.map(|f| mse(&f, &t2)).transpose()?,
        s2_direct_diag_mse: mse(&diag, &t2d)?,
        s2_fd_mse: mse(&fd, &t2)?,
        s2_fd_diag_mse: mse(&diagonals(&fd, d)?, &t2d)?,
    })
}

fn summarize(rows: &[EvalRow]) -> (EvalRow, EvalRow) {
    let n = rows.len() as f64;
    let stat = |f: &dyn Fn(&EvalRow) -> f64| {
        let m = rows.iter().map(f).sum::<f64>() / n;
        let v = if rows.len() > 1 {
            rows.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (m, v.sqrt())
    };
    let full = rows.iter().all(|r| r.s2_direct_mse.is_some()).then(|| stat(&|r| r.s2_direct_mse.unwrap()));
    let (s1, s2d, fd, fdd) = (
        stat(&|r| r.s1_mse),
        stat(&|r| r.s2_direct_diag_mse),
        stat(&|r| r.s2_fd_mse),
        stat(&|r| r.s2_fd_diag_mse),
    );
    let row = |pick: fn((f64, f64)) -> f64| EvalRow {
        seed: 0,
        s1_mse: pick(s1),
        s2_direct_mse: full.map(pick),
        s2_direct_diag_mse: pick(s2d),
        s2_fd_mse: pick(fd),
        s2_fd_diag_mse: pick(fdd),
    };
    (row(|p| p.0), row(|p| p.1))
}

fn truth_for(cfg: &ExperimentConfig, dist: &Distribution, sigma: f64) -> Result<(String, Distribution)> {
    let noisy = dist.noisy(sigma)?;
    match (cfg.eval.truth, noisy) {
        (Truth::Clean, _) | (Truth::Auto, None) => Ok(("clean".into(), dist.clone())),
        (_, Some(n)) => Ok(("noisy".into(), n)),
        (Truth::Noisy, None) => Err(invalid(format!("{} has no closed-form noisy scores", dist.kind()))),
    }
}

/// Compares direct second-order scores and the finite-difference Jacobian
/// of the first-order model against analytic scores at noisy test points.
/// Without a checkpoint each seed trains its own pair with `[train]`, so both
/// estimates come from the same training budget.
pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path) -> Result<(EvalReport, EvalTiming)> {
    let dist = cfg.distribution.build()?;
    let spec = &cfg.eval;
    let loaded = match &spec.checkpoint {
        Some(_) => Some(load_pair(cfg, &spec.checkpoint)?),
        None => None,
    };
    let sigma = loaded.as_ref().map_or(cfg.train.sigma, |p| p.sigma_train);
    let (truth_name, truth) = truth_for(cfg, &dist, sigma)?;
    let mut rows = Vec::new();
    let mut timing = None;
    for k in 0..spec.seeds as u64 {
        let seed = cfg.seed.wrapping_add(k);
        let trained;
        let est = if spec.oracle {
            Estimator::Oracle(&truth)
        } else if let Some(p) = &loaded {
            Estimator::Model(p)
        } else {
            let mut pair = ScoreModelPair::init(dist.dim(), &cfg.model, sigma, seed)?;
            let tc = hosm_core::objectives::TrainConfig { seed, ..cfg.train.clone() };
            if let Some(step) = train(&mut pair, &dist, &tc)?.diverged_at {
                return Err(CliError::Diverged(format!("training seed {seed} diverged at step {step}")));
            }
            trained = pair;
            Estimator::Model(&trained)
        };
        if let Estimator::Model(p) = &est {
            if p.dim() != dist.dim() {
                return Err(invalid(format!("checkpoint dim {} does not match distribution dim {}", p.dim(), dist.dim())));
            }
        }
        let x = test_points(&dist, spec.test_points, sigma, seed)?;
        rows.push(evaluate(&est, &truth, &x, spec.fd_step, seed)?);
        if k + 1 == spec.seeds as u64 {
            let direct = time_it(spec.timing_repeats, || est.s2(&x).map(drop))?;
            let fd = time_it(spec.timing_repeats, || est.fd_jacobian(&x, spec.fd_step).map(drop))?;
            timing = Some(EvalTiming {
                direct,
                finite_difference: fd,
            });
        }
    }
    let (mean, std) = summarize(&rows);
    let within_tolerance = spec
        .mse_tolerance
        .map(|tol| rows.iter().all(|r| r.s2_direct_mse.unwrap_or(r.s2_direct_diag_mse) < tol));
    let report = EvalReport {
        truth: truth_name,
        sigma,
        test_points: spec.test_points,
        rows,
        mean,
        std,
        within_tolerance,
    };
    let timing = timing.expect("at least one seed");
    match cfg.format {
        OutputFormat::Json => write_json(&out.join(EVAL_JSON), &report)?,
        OutputFormat::Csv => write_eval_csv(&report, std::fs::File::create(out.join(EVAL_CSV))?)?,
    }
    write_json(&out.join(EVAL_TIMING), &timing)?;
    Ok((report, timing))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One line per seed followed by `mean` and `std` lines.
pub fn write_eval_csv<W: Write>(report: &EvalReport, mut w: W) -> Result<()> {
    writeln!(w, "{EVAL_CSV_HEADER}")?;
    let line = |label: String, r: &EvalRow| {
        format!(
            "{label},{},{},{},{},{}",
            r.s1_mse,
            opt(r.s2_direct_mse),
            r.s2_direct_diag_mse,
            r.s2_fd_mse,
            r.s2_fd_diag_mse
        )
    };
    for r in &report.rows {
        writeln!(w, "{}", line(r.seed.to_string(), r))?;
    }
    writeln!(w, "{}", line("mean".into(), &report.mean))?;
    writeln!(w, "{}", line("std".into(), &report.std))?;
    Ok(())
}

/// The per-seed rows of an eval CSV; the summary lines are skipped.
pub fn read_eval_csv<R: BufRead>(r: R) -> Result<Vec<EvalRow>> {
    let mut lines = r.lines();
    if lines.next().transpose()?.as_deref() != Some(EVAL_CSV_HEADER) {
        return Err(invalid("eval csv: unexpected header"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 6 {
            return Err(invalid(format!("eval csv line {}: expected 6 fields", i + 2)));
        }
        if cells[0] == "mean" || cells[0] == "std" {
            continue;
        }
        let bad = || invalid(format!("eval csv line {}: not a number", i + 2));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push(EvalRow {
            seed: cells[0].parse().map_err(|_| bad())?,
            s1_mse: num(cells[1])?,
            s2_direct_mse: if cells[2].is_empty() { None } else { Some(num(cells[2])?) },
            s2_direct_diag_mse: num(cells[3])?,
            s2_fd_mse: num(cells[4])?,
            s2_fd_diag_mse: num(cells[5])?,
        });
    }
    Ok(out)
}
