//! Synthetic data sources with exact samplers and closed-form scores.
//!
//! These are the ground truth every learned quantity is measured against:
//! log-density, first-order score `∇ log p` and second-order score
//! `∇² log p`, all evaluated analytically.

mod spec;

pub use spec::{random_spd, DistributionSpec, GaussianCovSpec};

use crate::error::{invalid, shape_err, Error, Result};
use crate::linalg::{dot, Matrix};
use crate::rng::standard_normal_vec;
use rand::Rng;
use std::f64::consts::PI;
use std::io::{BufRead, Write};

/// Log-density and the first two scores at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub log_density: f64,
    pub s1: Vec<f64>,
    pub s2: Matrix,
}

/// Mixture of Gaussians sharing one covariance. A single component is a
/// plain multivariate normal.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    log_weights: Vec<f64>,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    cov: Matrix,
    chol: Matrix,
    precision: Matrix,
    log_norm: f64,
}

/// Mixture of products of independent logistic densities, one set of
/// per-dimension locations and scales for each component.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticMixture {
    log_weights: Vec<f64>,
    weights: Vec<f64>,
    locations: Vec<Vec<f64>>,
    scales: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Distribution {
    GaussianMixture(GaussianMixture),
    LogisticMixture(LogisticMixture),
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(invalid("mixture needs at least one component"));
    }
    if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(invalid("mixture weights must be positive"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("mixture weights sum to {total}, not 1")));
    }
    Ok(())
}

/// `log Σ exp(v_k)` and the normalized responsibilities.
fn log_sum_exp(v: &[f64]) -> (f64, Vec<f64>) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    (m + s.ln(), exps.into_iter().map(|e| e / s).collect())
}

/// `s2 = base + Σ_k r_k g_k g_kᵀ − s1 s1ᵀ`, filled symmetrically.
fn mixture_hessian(base: Matrix, resp: &[f64], grads: &[Vec<f64>], s1: &[f64]) -> Matrix {
    let d = s1.len();
    let mut s2 = base;
    for i in 0..d {
        for j in i..d {
            let mut v = -s1[i] * s1[j];
            for (r, g) in resp.iter().zip(grads) {
                v += r * g[i] * g[j];
            }
            let v = s2[(i, j)] + v;
            s2[(i, j)] = v;
            s2[(j, i)] = v;
        }
    }
    s2
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, cov: Matrix) -> Result<Self> {
        check_weights(&weights)?;
        if weights.len() != means.len() {
            return Err(shape_err(format!("{} means", weights.len()), means.len()));
        }
        let d = cov.rows();
        if cov.cols() != d || d == 0 {
            return Err(invalid("covariance must be a non-empty square matrix"));
        }
        if let Some(m) = means.iter().find(|m| m.len() != d) {
            return Err(shape_err(format!("mean of dimension {d}"), m.len()));
        }
        if cov.max_asymmetry() > 1e-12 * cov.max_abs().max(1.0) {
            return Err(Error::Asymmetric(cov.max_asymmetry()));
        }
        let cov = cov.symmetrized();
        let chol = nalgebra::Cholesky::new(cov.to_nalgebra())
            .ok_or_else(|| invalid("covariance is not positive definite"))?;
        let l = chol.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = Matrix::from_nalgebra(&chol.inverse()).symmetrized();
        Ok(Self {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            weights,
            means,
            chol: Matrix::from_nalgebra(&l),
            precision,
            cov,
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
        })
    }

    pub fn dim(&self) -> usize {
        self.cov.rows()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    pub fn precision(&self) -> &Matrix {
        &self.precision
    }

    fn scores(&self, x: &[f64]) -> Scores {
        let d = self.dim();
        let mut logs = Vec::with_capacity(self.means.len());
        let mut grads = Vec::with_capacity(self.means.len());
        for (lw, mu) in self.log_weights.iter().zip(&self.means) {
            let diff: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
            let pd = self.precision.matvec(&diff).expect("dimension checked");
            logs.push(lw + self.log_norm - 0.5 * dot(&diff, &pd));
            grads.push(pd.into_iter().map(|v| -v).collect::<Vec<_>>());
        }
        let (log_density, resp) = log_sum_exp(&logs);
        let mut s1 = vec![0.0; d];
        for (r, g) in resp.iter().zip(&grads) {
            for (s, gi) in s1.iter_mut().zip(g) {
                *s += r * gi;
            }
        }
        let s2 = if self.means.len() == 1 {
            self.precision.scale(-1.0)
        } else {
            mixture_hessian(self.precision.scale(-1.0), &resp, &grads, &s1)
        };
        Scores {
            log_density,
            s1,
            s2,
        }
    }

    fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = pick_component(&self.weights, rng);
        let z = standard_normal_vec(rng, self.dim());
        let lz = self.chol.matvec(&z).expect("dimension checked");
        self.means[k].iter().zip(lz).map(|(m, v)| m + v).collect()
    }

    /// Same mixture convolved with `N(0, σ² I)`.
    pub fn convolved(&self, sigma: f64) -> Result<Self> {
        let mut cov = self.cov.clone();
        for i in 0..self.dim() {
            cov[(i, i)] += sigma * sigma;
        }
        Self::new(self.weights.clone(), self.means.clone(), cov)
    }
}

impl LogisticMixture {
    pub fn new(weights: Vec<f64>, locations: Vec<Vec<f64>>, scales: Vec<Vec<f64>>) -> Result<Self> {
        check_weights(&weights)?;
        if locations.len() != weights.len() || scales.len() != weights.len() {
            return Err(shape_err(
                format!("{} components", weights.len()),
                format!("{} locations / {} scales", locations.len(), scales.len()),
            ));
        }
        let d = locations[0].len();
        if d == 0 {
            return Err(invalid("dimension must be positive"));
        }
        for (l, s) in locations.iter().zip(&scales) {
            if l.len() != d || s.len() != d {
                return Err(shape_err(format!("dimension {d}"), format!("{}/{}", l.len(), s.len())));
            }
            if s.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(invalid("logistic scales must be positive"));
            }
        }
        Ok(Self {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            weights,
            locations,
            scales,
        })
    }

    pub fn dim(&self) -> usize {
        self.locations[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn locations(&self) -> &[Vec<f64>] {
        &self.locations
    }

    pub fn scales(&self) -> &[Vec<f64>] {
        &self.scales
    }

    fn scores(&self, x: &[f64]) -> Scores {
        let d = self.dim();
        let k = self.weights.len();
        let mut logs = Vec::with_capacity(k);
        let mut grads = Vec::with_capacity(k);
        let mut curv = Vec::with_capacity(k);
        for c in 0..k {
            let mut lp = self.log_weights[c];
            let mut g = vec![0.0; d];
            let mut h = vec![0.0; d];
            for i in 0..d {
                let s = self.scales[c][i];
                let u = (x[i] - self.locations[c][i]) / s;
                // log pdf = -|u| - ln s - 2 ln(1 + e^{-|u|})
                lp += -u.abs() - s.ln() - 2.0 * (-u.abs()).exp().ln_1p();
                let t = (0.5 * u).tanh();
                g[i] = -t / s;
                h[i] = -(1.0 - t * t) / (2.0 * s * s);
            }
            logs.push(lp);
            grads.push(g);
            curv.push(h);
        }
        let (log_density, resp) = log_sum_exp(&logs);
        let mut s1 = vec![0.0; d];
        let mut base = Matrix::zeros(d, d);
        for ((r, g), h) in resp.iter().zip(&grads).zip(&curv) {
            for i in 0..d {
                s1[i] += r * g[i];
                base[(i, i)] += r * h[i];
            }
        }
        let s2 = mixture_hessian(base, &resp, &grads, &s1);
        Scores {
            log_density,
            s1,
            s2,
        }
    }

    fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = pick_component(&self.weights, rng);
        (0..self.dim())
            .map(|i| {
                // inverse CDF; open interval keeps the logit finite
                let u: f64 = rng.random_range(f64::EPSILON..1.0 - f64::EPSILON);
                self.locations[k][i] + self.scales[k][i] * (u / (1.0 - u)).ln()
            })
            .collect()
    }
}

fn pick_component<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    if weights.len() == 1 {
        return 0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

impl Distribution {
    pub fn gaussian(mean: Vec<f64>, cov: Matrix) -> Result<Self> {
        Ok(Self::GaussianMixture(GaussianMixture::new(vec![1.0], vec![mean], cov)?))
    }

    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::gaussian(vec![0.0; dim], Matrix::identity(dim))
    }

    /// Equal-weight pair of Gaussians at `±center` with identity covariance.
    pub fn two_mode(center: Vec<f64>) -> Result<Self> {
        let d = center.len();
        let neg = center.iter().map(|v| -v).collect();
        Ok(Self::GaussianMixture(GaussianMixture::new(
            vec![0.5, 0.5],
            vec![center, neg],
            Matrix::identity(d),
        )?))
    }

    /// `components` isotropic Gaussians evenly spaced on a circle.
    pub fn ring(components: usize, radius: f64, std: f64) -> Result<Self> {
        if components == 0 || !(std > 0.0) {
            return Err(invalid("ring needs components > 0 and std > 0"));
        }
        let means = (0..components)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / components as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        let w = vec![1.0 / components as f64; components];
        Ok(Self::GaussianMixture(GaussianMixture::new(
            w,
            means,
            Matrix::identity(2).scale(std * std),
        )?))
    }

    /// Isotropic clusters on the black squares of an `n x n` board of the given spacing.
    pub fn checker(n: usize, spacing: f64, std: f64) -> Result<Self> {
        if n == 0 || !(std > 0.0) {
            return Err(invalid("checker needs n > 0 and std > 0"));
        }
        let offset = 0.5 * spacing * (n as f64 - 1.0);
        let means: Vec<Vec<f64>> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|(i, j)| (i + j) % 2 == 0)
            .map(|(i, j)| vec![i as f64 * spacing - offset, j as f64 * spacing - offset])
            .collect();
        let w = vec![1.0 / means.len() as f64; means.len()];
        Ok(Self::GaussianMixture(GaussianMixture::new(
            w,
            means,
            Matrix::identity(2).scale(std * std),
        )?))
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::GaussianMixture(g) => g.dim(),
            Self::LogisticMixture(l) => l.dim(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::GaussianMixture(g) if g.means.len() == 1 => "gaussian",
            Self::GaussianMixture(_) => "gaussian-mixture",
            Self::LogisticMixture(_) => "logistic-mixture",
        }
    }

    /// Closed-form log-density, `∇ log p` and `∇² log p` (exactly symmetric).
    pub fn scores(&self, x: &[f64]) -> Result<Scores> {
        if x.len() != self.dim() {
            return Err(shape_err(format!("point of dimension {}", self.dim()), x.len()));
        }
        Ok(match self {
            Self::GaussianMixture(g) => g.scores(x),
            Self::LogisticMixture(l) => l.scores(x),
        })
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.scores(x)?.log_density)
    }

    pub fn s1(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.scores(x)?.s1)
    }

    pub fn s2(&self, x: &[f64]) -> Result<Matrix> {
        Ok(self.scores(x)?.s2)
    }

    /// `n` iid draws, one per row.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Matrix> {
        if n == 0 {
            return Err(invalid("sample count must be at least 1"));
        }
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| match self {
                Self::GaussianMixture(g) => g.sample_one(rng),
                Self::LogisticMixture(l) => l.sample_one(rng),
            })
            .collect();
        Matrix::from_rows(&rows)
    }

    /// The Gaussian-smoothed density `q_σ = p * N(0, σ² I)` when it has a
    /// closed form (Gaussian bases only).
    pub fn noisy(&self, sigma: f64) -> Result<Option<Distribution>> {
        check_sigma(sigma)?;
        Ok(match self {
            Self::GaussianMixture(g) => Some(Self::GaussianMixture(g.convolved(sigma)?)),
            Self::LogisticMixture(_) => None,
        })
    }
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("noise scale must be positive, got {sigma}")));
    }
    Ok(())
}

/// `x̃ = x + σ z` with `z ~ N(0, I)`; returns `(x̃, z)`.
pub fn perturb<R: Rng + ?Sized>(x: &[f64], sigma: f64, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    check_sigma(sigma)?;
    let z = standard_normal_vec(rng, x.len());
    Ok((perturb_with(x, &z, sigma), z))
}

/// `x + σ z` for a given `z`.
pub fn perturb_with(x: &[f64], z: &[f64], sigma: f64) -> Vec<f64> {
    x.iter().zip(z).map(|(a, b)| a + sigma * b).collect()
}

/// Writes samples as CSV: header `x0,x1,...`, one row per sample.
pub fn write_samples_csv<W: Write>(samples: &Matrix, mut w: W) -> Result<()> {
    let header: Vec<String> = (0..samples.cols()).map(|i| format!("x{i}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for row in samples.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Reads the format written by [`write_samples_csv`]. A header-only file
/// gives an empty `0 x D` matrix.
pub fn read_samples_csv<R: BufRead>(r: R) -> Result<Matrix> {
    let mut lines = r.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Ok(Matrix::zeros(0, 0)),
    };
    let dim = header.split(',').filter(|s| !s.trim().is_empty()).count();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("line {}: {e}", i + 2)))?;
        if vals.len() != dim {
            return Err(Error::Config(format!(
                "line {}: expected {dim} values, found {}",
                i + 2,
                vals.len()
            )));
        }
        data.extend(vals);
        rows += 1;
    }
    Matrix::from_vec(rows, dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    fn all_kinds() -> Vec<Distribution> {
        vec![
            Distribution::standard_normal(3).unwrap(),
            Distribution::gaussian(
                vec![1.0, -1.0],
                Matrix::from_rows(&[[2.0, 0.6], [0.6, 1.0]]).unwrap(),
            )
            .unwrap(),
            Distribution::two_mode(vec![3.0, 0.0]).unwrap(),
            Distribution::ring(8, 2.0, 0.3).unwrap(),
            Distribution::checker(4, 1.0, 0.2).unwrap(),
            DistributionSpec::LogisticMixture {
                dim: 3,
                components: 4,
                seed: 5,
                location_range: 2.0,
                scale_min: 0.3,
                scale_max: 1.0,
            }
            .build()
            .unwrap(),
        ]
    }

    #[test]
    fn standard_normal_scores() {
        let d = Distribution::standard_normal(2).unwrap();
        let s = d.scores(&[0.7, -1.2]).unwrap();
        assert_eq!(s.s1, vec![-0.7, 1.2]);
        assert_eq!(s.s2, Matrix::identity(2).scale(-1.0));
    }

    #[test]
    fn general_gaussian_scores() {
        let cov = Matrix::from_rows(&[[2.0, 0.5], [0.5, 1.0]]).unwrap();
        let mu = vec![1.0, 2.0];
        let d = Distribution::gaussian(mu.clone(), cov.clone()).unwrap();
        let x = [0.3, -0.4];
        let prec = Matrix::from_nalgebra(&cov.to_nalgebra().try_inverse().unwrap());
        let diff = [x[0] - mu[0], x[1] - mu[1]];
        let expect = prec.matvec(&diff).unwrap();
        let s = d.scores(&x).unwrap();
        for (a, b) in s.s1.iter().zip(&expect) {
            assert!((a + b).abs() < 1e-12);
        }
        assert!(s.s2.add(&prec).unwrap().max_abs() < 1e-12);
    }

    // Central differences of the analytic log-density against s1, and of s1 against s2,
    // at 100 random points for every family.
    #[test]
    fn scores_match_finite_differences() {
        let mut rng = seeded(42);
        for dist in all_kinds() {
            for _ in 0..100 {
                let x: Vec<f64> = (0..dist.dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
                let s = dist.scores(&x).unwrap();
                let g = fd_grad(|p| dist.log_density(p).unwrap(), &x, 1e-5);
                assert!(rel_err(&s.s1, &g) < 1e-5, "{} s1 at {x:?}", dist.kind());
                for i in 0..dist.dim() {
                    let col = fd_grad(|p| dist.s1(p).unwrap()[i], &x, 1e-5);
                    let row: Vec<f64> = s.s2.row(i).to_vec();
                    assert!(rel_err(&row, &col) < 1e-4, "{} s2 row {i}", dist.kind());
                }
                assert_eq!(s.s2.max_asymmetry(), 0.0);
            }
        }
    }

    #[test]
    fn one_d_logistic_mixture_on_grid() {
        let dist = Distribution::LogisticMixture(
            LogisticMixture::new(vec![0.3, 0.7], vec![vec![-1.5], vec![2.0]], vec![vec![0.5], vec![0.8]])
                .unwrap(),
        );
        for k in 0..20 {
            let x = [-4.0 + 8.0 * k as f64 / 19.0];
            let s = dist.scores(&x).unwrap();
            let g = fd_grad(|p| dist.log_density(p).unwrap(), &x, 1e-5);
            assert!((s.s1[0] - g[0]).abs() < 1e-5 * g[0].abs().max(1.0));
            let h = fd_grad(|p| dist.s1(p).unwrap()[0], &x, 1e-5);
            assert!((s.s2[(0, 0)] - h[0]).abs() < 1e-5 * h[0].abs().max(1.0));
        }
    }

    #[test]
    fn tiny_scales_do_not_overflow() {
        let dist = Distribution::LogisticMixture(
            LogisticMixture::new(vec![0.5, 0.5], vec![vec![0.0, 0.0], vec![5.0, 5.0]], vec![vec![1e-3; 2]; 2])
                .unwrap(),
        );
        for x in [[0.0, 0.0], [2.5, 2.5], [100.0, -100.0]] {
            let s = dist.scores(&x).unwrap();
            assert!(s.log_density.is_finite() && s.s1.iter().all(|v| v.is_finite()) && s.s2.is_finite());
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(GaussianMixture::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], Matrix::identity(1)).is_err());
        assert!(Distribution::gaussian(vec![0.0, 0.0], Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap()).is_err());
        assert!(Distribution::gaussian(vec![0.0, 0.0], Matrix::from_rows(&[[1.0, 0.1], [0.0, 1.0]]).unwrap()).is_err());
        assert!(LogisticMixture::new(vec![1.0], vec![vec![0.0]], vec![vec![-1.0]]).is_err());
        assert!(Distribution::standard_normal(2).unwrap().sample(0, &mut seeded(0)).is_err());
        assert!(Distribution::standard_normal(2).unwrap().scores(&[1.0]).is_err());
    }

    #[test]
    fn standard_normal_sample_mean() {
        let d = Distribution::standard_normal(2).unwrap();
        let s = d.sample(100_000, &mut seeded(1)).unwrap();
        for j in 0..2 {
            let mean: f64 = (0..s.rows()).map(|i| s[(i, j)]).sum::<f64>() / s.rows() as f64;
            assert!(mean.abs() < 0.02, "coord {j} mean {mean}");
        }
    }

    #[test]
    fn concentrated_mixture_samples_at_location() {
        let d = Distribution::LogisticMixture(
            LogisticMixture::new(vec![1.0], vec![vec![4.0, -2.0]], vec![vec![1e-6; 2]]).unwrap(),
        );
        let s = d.sample(100, &mut seeded(2)).unwrap();
        for r in s.row_iter() {
            assert!((r[0] - 4.0).abs() < 1e-3 && (r[1] + 2.0).abs() < 1e-3);
        }
    }

    #[test]
    fn two_mode_splits_evenly() {
        let d = Distribution::two_mode(vec![3.0, 0.0]).unwrap();
        let s = d.sample(10_000, &mut seeded(3)).unwrap();
        let right = s.row_iter().filter(|r| r[0] > 0.0).count();
        assert!((right as f64 / 10_000.0 - 0.5).abs() < 0.02, "{right}");
    }

    #[test]
    fn perturb_identities() {
        let x = [1.0, 2.0];
        let z = [0.0, 0.0];
        assert_eq!(perturb_with(&x, &z, 0.7), x.to_vec());
        let mut rng = seeded(4);
        let (xt, z) = perturb(&[0.0, 0.0], 1.0, &mut rng).unwrap();
        assert_eq!(xt, z);
        assert!(perturb(&x, 0.0, &mut rng).is_err());
        assert!(perturb(&x, -1.0, &mut rng).is_err());
    }

    #[test]
    fn perturb_variance() {
        let mut rng = seeded(5);
        let sigma = 0.3;
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let (xt, _) = perturb(&[2.0], sigma, &mut rng).unwrap();
            acc += (xt[0] - 2.0).powi(2);
        }
        let var = acc / n as f64;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn noisy_gaussian_is_exact() {
        let cov = Matrix::from_rows(&[[1.5, 0.2], [0.2, 0.5]]).unwrap();
        let d = Distribution::gaussian(vec![0.5, 0.0], cov.clone()).unwrap();
        let sigma = 0.4;
        let q = d.noisy(sigma).unwrap().unwrap();
        let mut c = cov;
        c[(0, 0)] += 0.16;
        c[(1, 1)] += 0.16;
        let inv = Matrix::from_nalgebra(&c.to_nalgebra().try_inverse().unwrap());
        let x = [1.0, -1.0];
        let s = q.scores(&x).unwrap();
        let expect = inv.matvec(&[0.5, -1.0]).unwrap();
        for (a, b) in s.s1.iter().zip(expect) {
            assert!((a + b).abs() < 1e-12);
        }
        assert!(s.s2.add(&inv).unwrap().max_abs() < 1e-12);
        assert!(d.noisy(0.0).is_err());
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let s = Distribution::ring(4, 1.0, 0.1).unwrap().sample(5, &mut seeded(6)).unwrap();
        let mut buf = Vec::new();
        write_samples_csv(&s, &mut buf).unwrap();
        assert!(buf.starts_with(b"x0,x1\n"));
        assert_eq!(read_samples_csv(&buf[..]).unwrap(), s);
        let bad = b"x0,x1\n1,2\n3,oops\n";
        let err = read_samples_csv(&bad[..]).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let empty = read_samples_csv(&b"x0,x1\n"[..]).unwrap();
        assert_eq!(empty.shape(), (0, 2));
    }
}
