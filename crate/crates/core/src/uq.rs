//! Denoising uncertainty: the Gaussian approximation to `p(x | x̃)` built
//! from the posterior mean and covariance, its eigen-analysis and samples.

use crate::distributions::check_sigma;
use crate::error::{invalid, shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::models::{ScoreModelPair, SecondOrderMode};
use crate::objectives::tweedie_mean;
use crate::rng::{seeded, standard_normal_vec};
use serde::{Deserialize, Serialize};

const SYMMETRY_TOL: f64 = 1e-8;
/// Above this dimension the full eigensolve gets slow; desk-scale runs stay below.
pub const LARGE_DIM: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub noisy: Vec<f64>,
    pub sigma: f64,
    pub mean: Vec<f64>,
    /// Projected covariance, rows of a symmetric PSD matrix.
    pub cov: Vec<Vec<f64>>,
    pub diag: Vec<f64>,
    /// Leading eigenpairs of `cov`, largest first.
    pub top_eigen: Vec<EigenPair>,
    /// Eigenvalues of the symmetrized covariance before clipping, descending.
    pub pre_spectrum: Vec<f64>,
    /// Eigenvalues after clipping at zero, descending.
    pub post_spectrum: Vec<f64>,
    pub warnings: Vec<String>,
}

impl PosteriorSummary {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_matrix(&self) -> Matrix {
        if self.cov.is_empty() {
            return Matrix::zeros(0, 0);
        }
        Matrix::from_rows(&self.cov).expect("square covariance")
    }

    pub fn trace(&self) -> f64 {
        self.diag.iter().sum()
    }
}

fn sorted_eigen(m: &Matrix) -> (Vec<f64>, Vec<Vec<f64>>) {
    let eig = m.to_nalgebra().symmetric_eigen();
    let mut order: Vec<usize> = (0..m.rows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order.iter().map(|&i| eig.eigenvectors.column(i).iter().cloned().collect()).collect();
    (values, vectors)
}

/// Top `k` eigenpairs of a symmetric matrix, largest eigenvalue first, with
/// unit-norm vectors.
pub fn eigvecs_topk(cov: &Matrix, k: usize) -> Result<Vec<EigenPair>> {
    let (r, c) = cov.shape();
    if r != c {
        return Err(shape_err("square matrix", format!("({r}, {c})")));
    }
    if k > r {
        return Err(invalid(format!("asked for {k} eigenpairs of a {r}x{r} matrix")));
    }
    let asym = cov.max_asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::Asymmetric(asym));
    }
    if !cov.is_finite() {
        return Err(Error::NonFinite("covariance".into()));
    }
    let (values, vectors) = sorted_eigen(cov);
    Ok(values
        .into_iter()
        .zip(vectors)
        .take(k)
        .map(|(value, vector)| EigenPair { value, vector })
        .collect())
}

/// Builds the summary from a posterior mean and a raw covariance estimate.
/// The covariance is symmetrized and its negative eigenvalues are set to zero.
pub fn summarize(noisy: &[f64], sigma: f64, mean: Vec<f64>, raw_cov: &Matrix, k: usize) -> Result<PosteriorSummary> {
    let d = mean.len();
    if raw_cov.shape() != (d, d) {
        return Err(shape_err(format!("({d}, {d})"), format!("{:?}", raw_cov.shape())));
    }
    if !raw_cov.is_finite() || mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("posterior moments".into()));
    }
    let k = k.min(d);
    let mut warnings = Vec::new();
    if d > LARGE_DIM {
        warnings.push(format!("dimension {d} exceeds {LARGE_DIM}; full eigensolve is slow"));
    }
    let sym = raw_cov.symmetrized();
    let (pre, vectors) = sorted_eigen(&sym);
    let post: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    let clipped = pre.iter().filter(|v| **v < 0.0).count();
    if clipped > 0 {
        warnings.push(format!("clipped {clipped} negative eigenvalue(s); smallest {:e}", pre[d - 1]));
    }
    let mut cov = Matrix::zeros(d, d);
    for (lam, v) in post.iter().zip(&vectors) {
        if *lam == 0.0 {
            continue;
        }
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += lam * v[i] * v[j];
            }
        }
    }
    let cov = cov.symmetrized();
    let top_eigen = post
        .iter()
        .zip(&vectors)
        .take(k)
        .map(|(&value, v)| EigenPair {
            value,
            vector: v.clone(),
        })
        .collect();
    Ok(PosteriorSummary {
        noisy: noisy.to_vec(),
        sigma,
        diag: cov.diagonal(),
        cov: cov.row_iter().map(<[f64]>::to_vec).collect(),
        mean,
        top_eigen,
        pre_spectrum: pre,
        post_spectrum: post,
        warnings,
    })
}

/// Posterior summary from first- and second-order scores at `x̃`:
/// mean `x̃ + σ² s₁`, covariance `σ⁴ s₂ + σ² I`.
pub fn denoise_with_scores(noisy: &[f64], s1: &[f64], s2: &Matrix, sigma: f64, k: usize) -> Result<PosteriorSummary> {
    check_sigma(sigma)?;
    let d = noisy.len();
    if s2.shape() != (d, d) {
        return Err(shape_err(format!("({d}, {d})"), format!("{:?}", s2.shape())));
    }
    let mean = tweedie_mean(s1, noisy, sigma)?;
    let v2 = sigma * sigma;
    let mut cov = s2.scale(v2 * v2);
    for i in 0..d {
        cov[(i, i)] += v2;
    }
    summarize(noisy, sigma, mean, &cov, k)
}

/// Denoises `x̃` with a trained pair. A diag-only pair gives a diagonal
/// covariance.
pub fn denoise_with_uq(pair: &ScoreModelPair, noisy: &[f64], sigma: f64, k: usize) -> Result<PosteriorSummary> {
    if noisy.len() != pair.dim() {
        return Err(shape_err(pair.dim(), noisy.len()));
    }
    let s1 = pair.first.eval(noisy)?;
    let s2 = match pair.second.mode() {
        SecondOrderMode::Full => pair.second.eval(noisy)?,
        SecondOrderMode::DiagOnly => Matrix::diag(&pair.second.eval_diag(noisy)?),
    };
    if s1.iter().any(|v| !v.is_finite()) || !s2.is_finite() {
        return Err(Error::NonFinite("model output".into()));
    }
    let mut out = denoise_with_scores(noisy, &s1, &s2, sigma, k)?;
    if (sigma - pair.sigma_train).abs() > 1e-12 * sigma.max(pair.sigma_train) {
        out.warnings.insert(
            0,
            format!("model trained at sigma {} but used at sigma {sigma}", pair.sigma_train),
        );
    }
    Ok(out)
}

/// `n` draws from `N(mean, cov)` as rows, using the eigen square root of the
/// projected covariance. Eigenvalues below `D·ε·λ_max` count as zero so that
/// rank-deficient covariances keep draws in their support.
pub fn gaussian_posterior_sample(summary: &PosteriorSummary, n: usize, seed: u64) -> Result<Matrix> {
    let d = summary.dim();
    let cov = summary.cov_matrix();
    if cov.shape() != (d, d) {
        return Err(shape_err(format!("({d}, {d})"), format!("{:?}", cov.shape())));
    }
    let (values, vectors) = sorted_eigen(&cov);
    let cut = values.first().map_or(0.0, |m| m.abs() * d as f64 * f64::EPSILON);
    let roots: Vec<f64> = values.iter().map(|&v| if v > cut { v.sqrt() } else { 0.0 }).collect();
    let mut rng = seeded(seed);
    let mut out = Matrix::zeros(n, d);
    for r in 0..n {
        let z = standard_normal_vec(&mut rng, d);
        let row = out.row_mut(r);
        row.copy_from_slice(&summary.mean);
        for ((root, v), zz) in roots.iter().zip(&vectors).zip(&z) {
            if *root == 0.0 {
                continue;
            }
            for i in 0..d {
                row[i] += root * zz * v[i];
            }
        }
    }
    Ok(out)
}
