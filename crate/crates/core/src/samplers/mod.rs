//! Langevin dynamics and its diagonal Ozaki discretization, run over
//! independent chains, with ESS and mode-crossing diagnostics.

mod ess;

pub use ess::{effective_sample_size, EssReport};

use crate::distributions::Distribution;
use crate::error::{invalid, shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::models::ScoreModelPair;
use crate::rng::{standard_normal_vec, stream, Rng64};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// Below this `|ε c|` the Ozaki coefficients use their Taylor expansions.
pub const TAYLOR_THRESHOLD: f64 = 1e-6;
/// Positive curvature is clamped to `c ≤ CLAMP_FACTOR / ε`.
pub const CLAMP_FACTOR: f64 = 10.0;
/// Chain `c` draws from stream `CHAIN_STREAM_BASE + c` of the sampler seed.
pub const CHAIN_STREAM_BASE: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Langevin,
    OzakiDiag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitSpec {
    GaussianNoise { std: f64 },
    FixedPoint { point: Vec<f64> },
    DataSample,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self::GaussianNoise { std: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub method: Method,
    pub step_size: f64,
    pub iterations: usize,
    pub burn_in: usize,
    pub chains: usize,
    pub seed: u64,
    pub init: InitSpec,
    /// Keep every retained position, needed for ESS and trajectory dumps.
    pub record: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: Method::Langevin,
            step_size: 0.01,
            iterations: 10_000,
            burn_in: 1000,
            chains: 32,
            seed: 0,
            init: InitSpec::default(),
            record: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        check_step(self.step_size)?;
        if self.burn_in >= self.iterations {
            return Err(invalid(format!(
                "burn-in {} must be below the iteration count {}",
                self.burn_in, self.iterations
            )));
        }
        if self.chains == 0 {
            return Err(invalid("at least one chain is required"));
        }
        if let InitSpec::GaussianNoise { std } = self.init {
            if !(std >= 0.0) || !std.is_finite() {
                return Err(invalid(format!("init std must be non-negative, got {std}")));
            }
        }
        Ok(())
    }
}

fn check_step(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(invalid(format!("step size must be positive, got {eps}")));
    }
    Ok(())
}

/// Scores evaluated for a batch of points, one per row.
pub trait ScoreSource {
    fn dim(&self) -> usize;
    fn s1_batch(&self, x: &Matrix) -> Result<Matrix>;
    /// Diagonal of the second-order score.
    fn s2_diag_batch(&self, x: &Matrix) -> Result<Matrix>;
}

impl ScoreSource for Distribution {
    fn dim(&self) -> usize {
        Distribution::dim(self)
    }

    fn s1_batch(&self, x: &Matrix) -> Result<Matrix> {
        let rows: Result<Vec<Vec<f64>>> = x.row_iter().map(|r| self.s1(r)).collect();
        from_rows(rows?, x.cols())
    }

    fn s2_diag_batch(&self, x: &Matrix) -> Result<Matrix> {
        let rows: Result<Vec<Vec<f64>>> = x.row_iter().map(|r| Ok(self.s2(r)?.diagonal())).collect();
        from_rows(rows?, x.cols())
    }
}

impl ScoreSource for ScoreModelPair {
    fn dim(&self) -> usize {
        ScoreModelPair::dim(self)
    }

    fn s1_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.first.eval_batch(x)
    }

    fn s2_diag_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.second.eval_diag_batch(x)
    }
}

fn from_rows(rows: Vec<Vec<f64>>, cols: usize) -> Result<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, cols));
    }
    Matrix::from_rows(&rows)
}

/// `x + (ε/2) s₁ + √ε z`
pub fn langevin_step(x: &[f64], s1: &[f64], eps: f64, z: &[f64]) -> Result<Vec<f64>> {
    check_step(eps)?;
    if s1.len() != x.len() || z.len() != x.len() {
        return Err(shape_err(x.len(), format!("score {} / noise {}", s1.len(), z.len())));
    }
    if s1.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score value in Langevin step".into()));
    }
    let sq = eps.sqrt();
    Ok(x.iter()
        .zip(s1)
        .zip(z)
        .map(|((xi, si), zi)| xi + 0.5 * eps * si + sq * zi)
        .collect())
}

/// Per-coordinate Ozaki coefficients: drift `m = coef · s₁ᵢ` and noise
/// variance `var`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OzakiCoeffs {
    pub coef: f64,
    pub var: f64,
    pub clamped: bool,
    pub taylor: bool,
}

/// `coef = (e^{εc} − 1)/c`, `var = (e^{2εc} − 1)/c`, with the Taylor forms
/// `ε(1 + εc/2)` and `2ε(1 + εc)` when `|εc| < 1e-6` and `c` clamped to
/// `10/ε` from above.
pub fn ozaki_coeffs(c: f64, eps: f64) -> Result<OzakiCoeffs> {
    check_step(eps)?;
    if !c.is_finite() {
        return Err(Error::NonFinite("second-order score in Ozaki step".into()));
    }
    let c_max = CLAMP_FACTOR / eps;
    let clamped = c > c_max;
    let c = c.min(c_max);
    let ec = eps * c;
    let taylor = ec.abs() < TAYLOR_THRESHOLD;
    let (coef, var) = if taylor {
        (eps * (1.0 + 0.5 * ec), 2.0 * eps * (1.0 + ec))
    } else {
        (ec.exp_m1() / c, (2.0 * ec).exp_m1() / c)
    };
    if !(var > 0.0) || !var.is_finite() || !coef.is_finite() {
        return Err(Error::NonFinite(format!("Ozaki noise variance {var} for c = {c}, ε = {eps}")));
    }
    Ok(OzakiCoeffs {
        coef,
        var,
        clamped,
        taylor,
    })
}

/// One diagonal Ozaki step; returns the new point and the number of clamped coordinates.
pub fn ozaki_diag_step(x: &[f64], s1: &[f64], s2_diag: &[f64], eps: f64, z: &[f64]) -> Result<(Vec<f64>, usize)> {
    check_step(eps)?;
    if s1.len() != x.len() || s2_diag.len() != x.len() || z.len() != x.len() {
        return Err(shape_err(
            x.len(),
            format!("score {} / diag {} / noise {}", s1.len(), s2_diag.len(), z.len()),
        ));
    }
    if s1.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score value in Ozaki step".into()));
    }
    let mut clamps = 0;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let k = ozaki_coeffs(s2_diag[i], eps)?;
        clamps += k.clamped as usize;
        out.push(x[i] + k.coef * s1[i] + k.var.sqrt() * z[i]);
    }
    Ok((out, clamps))
}

/// Positions and optional history of a finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    /// `chains x D`
    pub positions: Matrix,
    /// Retained positions laid out `[t][chain][dim]`.
    pub history: Option<Vec<f64>>,
    pub retained: usize,
    pub stream_ids: Vec<u64>,
    pub clamp_events: usize,
}

impl ChainState {
    pub fn chains(&self) -> usize {
        self.positions.rows()
    }

    pub fn dim(&self) -> usize {
        self.positions.cols()
    }

    /// Retained draw `t` of chain `c`.
    pub fn draw(&self, t: usize, c: usize) -> Option<&[f64]> {
        let h = self.history.as_ref()?;
        let (cc, d) = (self.chains(), self.dim());
        (t < self.retained && c < cc).then(|| &h[(t * cc + c) * d..(t * cc + c + 1) * d])
    }

    /// Per-dimension mean and variance over all retained draws.
    pub fn moments(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let h = self.history.as_ref()?;
        let d = self.dim();
        let n = (h.len() / d.max(1)) as f64;
        let mut mean = vec![0.0; d];
        for row in h.chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for row in h.chunks_exact(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / (n - 1.0);
            }
        }
        Some((mean, var))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRun {
    pub state: ChainState,
    pub ess: Option<EssReport>,
}

fn init_positions(cfg: &SamplerConfig, dim: usize, rngs: &mut [Rng64], data: Option<&Distribution>) -> Result<Matrix> {
    let mut x = Matrix::zeros(cfg.chains, dim);
    for (c, rng) in rngs.iter_mut().enumerate() {
        let row: Vec<f64> = match &cfg.init {
            InitSpec::GaussianNoise { std } => standard_normal_vec(rng, dim).into_iter().map(|v| std * v).collect(),
            InitSpec::FixedPoint { point } => {
                if point.len() != dim {
                    return Err(shape_err(format!("init point of length {dim}"), point.len()));
                }
                point.clone()
            }
            InitSpec::DataSample => {
                let d = data.ok_or_else(|| invalid("data-sample init needs a data distribution"))?;
                if d.dim() != dim {
                    return Err(shape_err(format!("data dim {dim}"), d.dim()));
                }
                d.sample(1, rng)?.into_vec()
            }
        };
        x.row_mut(c).copy_from_slice(&row);
    }
    Ok(x)
}

/// Runs `cfg.chains` independent chains. Each chain draws its initial point
/// and noise from its own stream, and scores are evaluated row-wise, so the
/// result does not depend on how chains are grouped or ordered.
pub fn run_chains(cfg: &SamplerConfig, source: &dyn ScoreSource, data: Option<&Distribution>) -> Result<SampleRun> {
    cfg.validate()?;
    let dim = source.dim();
    let stream_ids: Vec<u64> = (0..cfg.chains as u64).map(|c| CHAIN_STREAM_BASE + c).collect();
    let mut rngs: Vec<Rng64> = stream_ids.iter().map(|&id| stream(cfg.seed, id)).collect();
    let mut x = init_positions(cfg, dim, &mut rngs, data)?;
    let retained = cfg.iterations - cfg.burn_in;
    let mut history = cfg.record.then(|| Vec::with_capacity(retained * cfg.chains * dim));
    let mut clamp_events = 0;
    let eps = cfg.step_size;

    for step in 0..cfg.iterations {
        let s1 = source.s1_batch(&x)?;
        let s2 = match cfg.method {
            Method::Langevin => None,
            Method::OzakiDiag => Some(source.s2_diag_batch(&x)?),
        };
        let mut next = Matrix::zeros(cfg.chains, dim);
        for (c, rng) in rngs.iter_mut().enumerate() {
            let z = standard_normal_vec(rng, dim);
            let diverged = || Error::Divergence {
                step,
                chain: c,
                last_finite: x.row(c).to_vec(),
            };
            let row = match &s2 {
                None => langevin_step(x.row(c), s1.row(c), eps, &z).map_err(|_| diverged())?,
                Some(s2) => {
                    let (row, k) = ozaki_diag_step(x.row(c), s1.row(c), s2.row(c), eps, &z).map_err(|_| diverged())?;
                    clamp_events += k;
                    row
                }
            };
            if row.iter().any(|v| !v.is_finite()) {
                return Err(diverged());
            }
            next.row_mut(c).copy_from_slice(&row);
        }
        x = next;
        if step >= cfg.burn_in {
            if let Some(h) = history.as_mut() {
                h.extend_from_slice(x.as_slice());
            }
        }
    }
    let ess = history
        .as_ref()
        .map(|h| effective_sample_size(h, retained, cfg.chains, dim));
    Ok(SampleRun {
        state: ChainState {
            positions: x,
            history,
            retained,
            stream_ids,
            clamp_events,
        },
        ess,
    })
}

/// Nearest-center label changes along each chain's retained draws.
pub fn mode_crossings(state: &ChainState, centers: &[Vec<f64>]) -> Result<Vec<usize>> {
    if state.history.is_none() {
        return Err(invalid("mode crossings need a recorded history"));
    }
    if centers.iter().any(|c| c.len() != state.dim()) {
        return Err(shape_err(state.dim(), "center of another length"));
    }
    let label = |x: &[f64]| -> usize {
        let dist = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        (0..centers.len())
            .min_by(|&i, &j| dist(&centers[i]).total_cmp(&dist(&centers[j])))
            .unwrap_or(0)
    };
    Ok((0..state.chains())
        .map(|c| {
            let mut prev = None;
            let mut count = 0;
            for t in 0..state.retained {
                let l = label(state.draw(t, c).expect("recorded"));
                if prev.is_some_and(|p| p != l) {
                    count += 1;
                }
                prev = Some(l);
            }
            count
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub step_size: f64,
    /// `None` when the pilot diverged.
    pub min_ess: Option<f64>,
    pub diverged_at: Option<usize>,
    pub clamp_events: usize,
    /// Largest relative error of the pilot's per-dimension variance against
    /// the guard's reference; `None` without a guard or after divergence.
    pub variance_error: Option<f64>,
    /// Excluded by the variance guard.
    pub rejected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: f64,
    pub table: Vec<TuneRow>,
}

/// Reference variances a pilot must reproduce to be eligible. Unadjusted
/// samplers gain ESS at large steps by drifting from the target, so ESS
/// alone would favour biased chains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceGuard {
    pub variance: Vec<f64>,
    pub tolerance: f64,
}

impl VarianceGuard {
    /// Reference variances from `n` draws of `dist`.
    pub fn from_distribution(dist: &Distribution, n: usize, seed: u64, tolerance: f64) -> Result<Self> {
        if n < 2 {
            return Err(invalid("variance guard needs at least two draws"));
        }
        let x = dist.sample(n, &mut stream(seed, 3))?;
        let d = x.cols();
        let nf = n as f64;
        let mut mean = vec![0.0; d];
        for row in x.row_iter() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / nf;
            }
        }
        let mut variance = vec![0.0; d];
        for row in x.row_iter() {
            for ((s, v), m) in variance.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / (nf - 1.0);
            }
        }
        Ok(Self { variance, tolerance })
    }

    pub fn error(&self, var: &[f64]) -> Result<f64> {
        if var.len() != self.variance.len() {
            return Err(shape_err(self.variance.len(), var.len()));
        }
        Ok(var
            .iter()
            .zip(&self.variance)
            .map(|(v, r)| ((v - r) / r).abs())
            .fold(0.0, f64::max))
    }
}

/// Runs one pilot per grid value with `pilot`'s other settings and keeps the
/// step size with the largest min-ESS among non-divergent pilots that pass
/// the optional variance guard. Ties go to the earlier grid entry.
pub fn tune_step_size(
    pilot: &SamplerConfig,
    grid: &[f64],
    source: &dyn ScoreSource,
    data: Option<&Distribution>,
    guard: Option<&VarianceGuard>,
) -> Result<TuneResult> {
    if grid.is_empty() {
        return Err(invalid("step-size grid is empty"));
    }
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &eps in grid {
        let cfg = SamplerConfig {
            step_size: eps,
            record: true,
            ..pilot.clone()
        };
        match run_chains(&cfg, source, data) {
            Ok(run) => {
                let ess = run.ess.expect("recorded").min_ess;
                let variance_error = match guard {
                    Some(g) => Some(g.error(&run.state.moments().expect("recorded").1)?),
                    None => None,
                };
                let rejected = match (guard, variance_error) {
                    (Some(g), Some(e)) => !(e <= g.tolerance),
                    _ => false,
                };
                if !rejected && best.is_none_or(|(_, b)| ess > b) {
                    best = Some((eps, ess));
                }
                table.push(TuneRow {
                    step_size: eps,
                    min_ess: Some(ess),
                    diverged_at: None,
                    clamp_events: run.state.clamp_events,
                    variance_error,
                    rejected,
                });
            }
            Err(Error::Divergence { step, .. }) => table.push(TuneRow {
                step_size: eps,
                min_ess: None,
                diverged_at: Some(step),
                clamp_events: 0,
                variance_error: None,
                rejected: false,
            }),
            Err(e) => return Err(e),
        }
    }
    match best {
        Some((best, _)) => Ok(TuneResult { best, table }),
        None => Err(invalid("no step size in the grid gave a usable pilot")),
    }
}

pub const TRAJECTORY_HEADER_PREFIX: &str = "iteration,chain";

/// CSV with header `iteration,chain,x0,...`; iterations count from the
/// first retained step.
pub fn write_trajectory_csv<W: Write>(state: &ChainState, burn_in: usize, mut w: W) -> Result<()> {
    let d = state.dim();
    let cols: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    writeln!(w, "{TRAJECTORY_HEADER_PREFIX},{}", cols.join(","))?;
    for t in 0..state.retained {
        for c in 0..state.chains() {
            let x = state.draw(t, c).ok_or_else(|| invalid("trajectory needs a recorded history"))?;
            let cells: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{},{}", burn_in + t, c, cells.join(","))?;
        }
    }
    Ok(())
}

/// Rows `(iteration, chain, point)` of a trajectory CSV.
pub fn read_trajectory_csv<R: BufRead>(r: R) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if !header.starts_with(TRAJECTORY_HEADER_PREFIX) {
        return Err(Error::Format("trajectory header missing".into()));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("trajectory line {}: not a number", i + 2));
        let mut cells = line.split(',');
        let t = cells.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        let c = cells.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
        let x: Result<Vec<f64>> = cells.map(|s| s.trim().parse().map_err(|_| bad())).collect();
        out.push((t, c, x?));
    }
    Ok(out)
}
