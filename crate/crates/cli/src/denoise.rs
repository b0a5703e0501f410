use crate::config::{ExperimentConfig, ScoreSourceKind};
use crate::error::{invalid, Result};
use crate::{load_pair, write_json};
use hosm_core::distributions::read_samples_csv;
use hosm_core::uq::{denoise_with_scores, denoise_with_uq, gaussian_posterior_sample, PosteriorSummary};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

pub const DENOISE_JSON: &str = "denoise.json";
pub const DENOISE_SAMPLES_CSV: &str = "denoise_samples.csv";

/// Posterior mean and covariance for every row of `denoise.input`, a CSV
/// with header `x0,x1,...`. With `denoise.samples > 0` also writes Gaussian
/// posterior samples, point `i` using seed `seed + i`.
pub fn cmd_denoise(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PosteriorSummary>> {
    let spec = &cfg.denoise;
    let input = cfg.existing(&spec.input, "denoise.input")?;
    let points = read_samples_csv(BufReader::new(std::fs::File::open(&input)?))
        .map_err(|e| invalid(format!("{}: {e}", input.display())))?;
    let pair = match spec.source {
        ScoreSourceKind::Checkpoint => Some(load_pair(cfg, &spec.checkpoint)?),
        ScoreSourceKind::Oracle => None,
    };
    let sigma = match (spec.sigma, &pair) {
        (Some(s), _) => s,
        (None, Some(p)) => p.sigma_train,
        (None, None) => return Err(invalid("denoise.sigma is required with the oracle source")),
    };
    let mut summaries = Vec::with_capacity(points.rows());
    if points.rows() > 0 {
        let dist = cfg.distribution.build()?;
        let dim = pair.as_ref().map_or(dist.dim(), |p| p.dim());
        if points.cols() != dim {
            return Err(invalid(format!("input points have {} columns, expected {dim}", points.cols())));
        }
        let k = spec.top_k.min(dim);
        let noisy = match &pair {
            None => Some(
                dist.noisy(sigma)?
                    .ok_or_else(|| invalid(format!("{} has no closed-form noisy scores", dist.kind())))?,
            ),
            Some(_) => None,
        };
        for x in points.row_iter() {
            let s = match (&pair, &noisy) {
                (Some(p), _) => denoise_with_uq(p, x, sigma, k)?,
                (None, Some(q)) => {
                    let sc = q.scores(x)?;
                    denoise_with_scores(x, &sc.s1, &sc.s2, sigma, k)?
                }
                (None, None) => unreachable!(),
            };
            summaries.push(s);
        }
    }
    write_json(&out.join(DENOISE_JSON), &summaries)?;
    if spec.samples > 0 {
        let mut w = BufWriter::new(std::fs::File::create(out.join(DENOISE_SAMPLES_CSV))?);
        let dim = points.cols();
        let cols: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
        writeln!(w, "point,{}", cols.join(","))?;
        for (i, s) in summaries.iter().enumerate() {
            let draws = gaussian_posterior_sample(s, spec.samples, cfg.seed.wrapping_add(i as u64))?;
            for row in draws.row_iter() {
                let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{i},{}", cells.join(","))?;
            }
        }
        w.flush()?;
    }
    Ok(summaries)
}
