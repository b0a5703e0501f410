use super::{loss_dsm_pair, loss_joint, psi_value, Batch, JointOptions, LossReport};
use crate::autodiff::AdamState;
use crate::distributions::{check_sigma, perturb_with, Distribution};
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::models::{ScoreModelPair, SecondOrderMode};
use crate::rng::{standard_normal_matrix, stream};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// First-order net only.
    Dsm,
    D2smJoint,
    D2smJointDiag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub sigma: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub variance_reduction: bool,
    /// Fit the first-order net with the DSM term only.
    pub detach_first_order: bool,
    pub objective: Objective,
    /// Log every this many steps; the first and last step are always logged.
    pub log_every: usize,
    /// Held-out noisy points for the excess-risk columns.
    pub eval_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            gamma: 1.0,
            batch_size: 128,
            steps: 5000,
            lr: 1e-3,
            seed: 0,
            variance_reduction: false,
            detach_first_order: false,
            objective: Objective::D2smJoint,
            log_every: 10,
            eval_points: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma)?;
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch size must be at least 2"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.log_every == 0 {
            return Err(invalid("log_every must be at least 1"));
        }
        Ok(())
    }
}

/// One line of the training log. The excess columns compare the model with
/// the exact noisy scores when the data density has a closed-form
/// smoothing: `dsm_excess = mean ‖s̃₁ − s̃₁*‖²` and
/// `d2sm_excess = mean ‖ψ − ψ*‖²_F` with `ψ = s̃₂ + s̃₁s̃₁ᵀ` (diagonal only for
/// the diagonal objective). These are the parts of the loss terms that
/// training can reduce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub total: f64,
    pub dsm: f64,
    pub d2sm: f64,
    pub dsm_excess: Option<f64>,
    pub d2sm_excess: Option<f64>,
    pub grad_norm: f64,
    pub wall_time: f64,
}

impl TrainLogRow {
    pub fn report(&self) -> LossReport {
        LossReport {
            step: self.step,
            total: self.total,
            dsm: self.dsm,
            d2sm: self.d2sm,
            grad_norm: self.grad_norm,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<TrainLogRow>,
    /// Step at which a non-finite loss or gradient stopped training. The
    /// model then holds the parameters from before that step.
    pub diverged_at: Option<usize>,
}

struct ExcessProbe {
    x: Matrix,
    s1: Matrix,
    psi: Matrix,
    psi_diag: Matrix,
}

impl ExcessProbe {
    fn new(dist: &Distribution, cfg: &TrainConfig) -> Result<Option<Self>> {
        let Some(noisy) = dist.noisy(cfg.sigma)? else {
            return Ok(None);
        };
        if cfg.eval_points == 0 {
            return Ok(None);
        }
        let mut rng = stream(cfg.seed, 2);
        let clean = dist.sample(cfg.eval_points, &mut rng)?;
        let z = standard_normal_matrix(&mut rng, clean.rows(), clean.cols());
        let rows: Vec<Vec<f64>> = clean
            .row_iter()
            .zip(z.row_iter())
            .map(|(x, z)| perturb_with(x, z, cfg.sigma))
            .collect();
        let x = Matrix::from_rows(&rows)?;
        let d = x.cols();
        let mut s1 = Matrix::zeros(x.rows(), d);
        let mut s2 = Matrix::zeros(x.rows(), d * d);
        for (n, row) in x.row_iter().enumerate() {
            let sc = noisy.scores(row)?;
            s1.row_mut(n).copy_from_slice(&sc.s1);
            s2.row_mut(n).copy_from_slice(sc.s2.as_slice());
        }
        let psi = psi_value(&s1, &s2)?;
        let diag_rows: Vec<Vec<f64>> = psi.row_iter().map(|r| (0..d).map(|i| r[i * d + i]).collect()).collect();
        Ok(Some(Self {
            psi_diag: Matrix::from_rows(&diag_rows)?,
            x,
            s1,
            psi,
        }))
    }

    fn measure(&self, pair: &ScoreModelPair, objective: Objective) -> Result<(f64, Option<f64>)> {
        let n = self.x.rows() as f64;
        let s1 = pair.first.eval_batch(&self.x)?;
        let dsm = s1.sub(&self.s1)?.frobenius_sq() / n;
        let d2sm = match objective {
            Objective::Dsm => None,
            Objective::D2smJoint => {
                let psi = psi_value(&s1, &pair.second.eval_batch(&self.x)?)?;
                Some(psi.sub(&self.psi)?.frobenius_sq() / n)
            }
            Objective::D2smJointDiag => {
                let psi = psi_value(&s1, &pair.second.eval_diag_batch(&self.x)?)?;
                Some(psi.sub(&self.psi_diag)?.frobenius_sq() / n)
            }
        };
        Ok((dsm, d2sm))
    }
}

/// Trains `pair` in place on fresh draws from `dist`. Data come from stream 1
/// of the seed and the held-out probe from stream 2.
pub fn train(pair: &mut ScoreModelPair, dist: &Distribution, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dist.dim() != pair.dim() {
        return Err(crate::error::shape_err(format!("distribution dim {}", pair.dim()), dist.dim()));
    }
    if cfg.objective == Objective::D2smJoint && pair.second.mode() == SecondOrderMode::DiagOnly {
        return Err(invalid("full joint objective needs a full-mode second-order model"));
    }
    pair.sigma_train = cfg.sigma;
    let probe = ExcessProbe::new(dist, cfg)?;
    let mut adam = AdamState::new(cfg.lr, pair.params());
    let mut rng = stream(cfg.seed, 1);
    let start = Instant::now();
    let mut log = Vec::new();

    for step in 0..cfg.steps {
        let x = dist.sample(cfg.batch_size, &mut rng)?;
        let batch = Batch::with_noise(x, &mut rng)?;
        let opts = JointOptions {
            diag: cfg.objective == Objective::D2smJointDiag,
            variance_reduction: cfg.variance_reduction,
            detach_first_order: cfg.detach_first_order,
        };
        let (report, grads) = match cfg.objective {
            Objective::Dsm => loss_dsm_pair(pair, &batch, cfg.sigma, cfg.variance_reduction)?,
            _ => loss_joint(pair, &batch, cfg.sigma, cfg.gamma, opts)?,
        };
        let finite = report.total.is_finite() && report.grad_norm.is_finite();
        if step == 0 || step + 1 == cfg.steps || step % cfg.log_every == 0 || !finite {
            let (dsm_excess, d2sm_excess) = match &probe {
                Some(p) => {
                    let (a, b) = p.measure(pair, cfg.objective)?;
                    (Some(a), b)
                }
                None => (None, None),
            };
            log.push(TrainLogRow {
                step,
                total: report.total,
                dsm: report.dsm,
                d2sm: report.d2sm,
                dsm_excess,
                d2sm_excess,
                grad_norm: report.grad_norm,
                wall_time: start.elapsed().as_secs_f64(),
            });
        }
        if !finite {
            return Ok(TrainOutcome {
                log,
                diverged_at: Some(step),
            });
        }
        adam.step(&mut pair.params_mut(), &grads)?;
    }
    Ok(TrainOutcome { log, diverged_at: None })
}

pub const TRAIN_LOG_HEADER: &str = "step,total,dsm,d2sm,dsm_excess,d2sm_excess,grad_norm,wall_time";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_train_log<W: Write>(rows: &[TrainLogRow], mut w: W) -> Result<()> {
    writeln!(w, "{TRAIN_LOG_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.total,
            r.dsm,
            r.d2sm,
            opt(r.dsm_excess),
            opt(r.d2sm_excess),
            r.grad_norm,
            r.wall_time
        )?;
    }
    Ok(())
}

pub fn read_train_log<R: BufRead>(r: R) -> Result<Vec<TrainLogRow>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some(TRAIN_LOG_HEADER) {
        return Err(Error::Format("training log header missing".into()));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("training log line {}: bad {what}", i + 2));
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 8 {
            return Err(bad("column count"));
        }
        let num = |k: usize| cells[k].trim().parse::<f64>().map_err(|_| bad("number"));
        let maybe = |k: usize| -> Result<Option<f64>> {
            if cells[k].trim().is_empty() {
                Ok(None)
            } else {
                num(k).map(Some)
            }
        };
        out.push(TrainLogRow {
            step: cells[0].trim().parse().map_err(|_| bad("step"))?,
            total: num(1)?,
            dsm: num(2)?,
            d2sm: num(3)?,
            dsm_excess: maybe(4)?,
            d2sm_excess: maybe(5)?,
            grad_norm: num(6)?,
            wall_time: num(7)?,
        });
    }
    Ok(out)
}
