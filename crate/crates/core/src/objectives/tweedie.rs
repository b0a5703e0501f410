//! Posterior moments of the clean point given a noisy observation, expressed
//! through scores of the noisy density.

use crate::distributions::check_sigma;
use crate::error::{invalid, shape_err, Error, Result};
use crate::linalg::Matrix;

const SYMMETRY_TOL: f64 = 1e-8;
const FD_STEP: f64 = 1e-4;

/// `E[x | x̃] = x̃ + σ² s̃₁(x̃)`
pub fn tweedie_mean(s1: &[f64], x_noisy: &[f64], sigma: f64) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    if s1.len() != x_noisy.len() {
        return Err(shape_err(x_noisy.len(), s1.len()));
    }
    Ok(x_noisy.iter().zip(s1).map(|(x, s)| x + sigma * sigma * s).collect())
}

fn check_s2(s2: &Matrix, d: usize) -> Result<()> {
    if s2.shape() != (d, d) {
        return Err(shape_err(format!("({d}, {d})"), format!("{:?}", s2.shape())));
    }
    let asym = s2.max_asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::Asymmetric(asym));
    }
    Ok(())
}

/// `E[xxᵀ | x̃] = x̃x̃ᵀ + σ²(x̃s₁ᵀ + s₁x̃ᵀ) + σ⁴(s₂ + s₁s₁ᵀ) + σ²I`
pub fn posterior_second_moment(s1: &[f64], s2: &Matrix, x_noisy: &[f64], sigma: f64) -> Result<Matrix> {
    check_sigma(sigma)?;
    let d = x_noisy.len();
    if s1.len() != d {
        return Err(shape_err(d, s1.len()));
    }
    check_s2(s2, d)?;
    let (v2, v4) = (sigma * sigma, sigma.powi(4));
    let mut out = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let (x, s) = (x_noisy, s1);
            let eye = if i == j { v2 } else { 0.0 };
            out[(i, j)] = x[i] * x[j] + v2 * (x[i] * s[j] + s[i] * x[j]) + v4 * (s2[(i, j)] + s[i] * s[j]) + eye;
        }
    }
    Ok(out)
}

/// `Cov[x | x̃] = σ⁴ s₂ + σ² I`
pub fn posterior_cov(s2: &Matrix, sigma: f64) -> Result<Matrix> {
    check_sigma(sigma)?;
    check_s2(s2, s2.rows())?;
    let v2 = sigma * sigma;
    let mut out = s2.scale(v2 * v2);
    for i in 0..out.rows() {
        out[(i, i)] += v2;
    }
    Ok(out.symmetrized())
}

/// Analytic scores of the noisy density, as needed by [`moment_recursion`].
pub struct ScoreOracle<'a> {
    pub s1: &'a dyn Fn(&[f64]) -> Result<Vec<f64>>,
    /// When present the second moment uses it directly instead of a finite
    /// difference of the first.
    pub s2: Option<&'a dyn Fn(&[f64]) -> Result<Matrix>>,
}

/// `E[⊗ⁿ x | x̃]` as a row-major tensor of length `Dⁿ`, via
/// `E[⊗ⁿ⁺¹x] = σ² ∂E[⊗ⁿx]/∂x̃ + σ² E[⊗ⁿx] ⊗ (s̃₁ + x̃/σ²)`.
/// Derivatives are central differences with step `1e-4`, which makes this an
/// oracle-grade path. Orders above 3 need `allow_high_order`.
pub fn moment_recursion(n: usize, x_noisy: &[f64], sigma: f64, oracle: &ScoreOracle<'_>, allow_high_order: bool) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    if n == 0 {
        return Err(invalid("moment order must be at least 1"));
    }
    if n > 3 && !allow_high_order {
        return Err(invalid(format!("moment order {n} exceeds 3; pass the override to allow it")));
    }
    moment(n, x_noisy, sigma, oracle)
}

fn moment(n: usize, x: &[f64], sigma: f64, oracle: &ScoreOracle<'_>) -> Result<Vec<f64>> {
    let s1 = (oracle.s1)(x)?;
    if s1.len() != x.len() {
        return Err(shape_err(x.len(), s1.len()));
    }
    if n == 1 {
        return tweedie_mean(&s1, x, sigma);
    }
    if n == 2 {
        if let Some(s2) = oracle.s2 {
            return Ok(posterior_second_moment(&s1, &s2(x)?, x, sigma)?.into_vec());
        }
    }
    let d = x.len();
    let v2 = sigma * sigma;
    let lower = moment(n - 1, x, sigma, oracle)?;
    let mut deriv = vec![0.0; lower.len() * d];
    let mut xp = x.to_vec();
    for k in 0..d {
        xp[k] = x[k] + FD_STEP;
        let up = moment(n - 1, &xp, sigma, oracle)?;
        xp[k] = x[k] - FD_STEP;
        let down = moment(n - 1, &xp, sigma, oracle)?;
        xp[k] = x[k];
        for (m, (u, w)) in up.iter().zip(&down).enumerate() {
            deriv[m * d + k] = (u - w) / (2.0 * FD_STEP);
        }
    }
    let shift: Vec<f64> = s1.iter().zip(x).map(|(s, xi)| s + xi / v2).collect();
    Ok(lower
        .iter()
        .enumerate()
        .flat_map(|(m, l)| {
            let deriv = &deriv;
            shift.iter().enumerate().map(move |(k, sh)| v2 * deriv[m * d + k] + v2 * l * sh)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Distribution;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn zero_score_mean_is_observation() {
        assert_eq!(tweedie_mean(&[0.0, 0.0], &[1.5, -2.0], 0.7).unwrap(), vec![1.5, -2.0]);
        assert!(tweedie_mean(&[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn standard_normal_posterior() {
        // x ~ N(0, I), σ = 1: x | x̃ ~ N(x̃/2, I/2).
        let q = Distribution::standard_normal(2).unwrap().noisy(1.0).unwrap().unwrap();
        let xt = [2.0, 0.0];
        let s1 = q.s1(&xt).unwrap();
        let s2 = q.s2(&xt).unwrap();
        close(&tweedie_mean(&s1, &xt, 1.0).unwrap(), &[1.0, 0.0], 1e-12);
        let m2 = posterior_second_moment(&s1, &s2, &xt, 1.0).unwrap();
        close(m2.as_slice(), &[1.5, 0.0, 0.0, 0.5], 1e-12);
        close(posterior_cov(&s2, 1.0).unwrap().as_slice(), &[0.5, 0.0, 0.0, 0.5], 1e-12);
    }

    #[test]
    fn noiseless_limit_and_degenerate_cov() {
        let xt = [0.3, -1.2];
        let s2 = Matrix::from_rows(&[[-0.4, 0.1], [0.1, -0.9]]).unwrap();
        let m2 = posterior_second_moment(&[0.5, 1.0], &s2, &xt, 1e-9).unwrap();
        close(m2.as_slice(), Matrix::outer(&xt, &xt).as_slice(), 1e-8);
        let sigma = 0.3;
        let cov = posterior_cov(&Matrix::identity(3).scale(-1.0 / (sigma * sigma)), sigma).unwrap();
        assert!(cov.max_abs() < 1e-15);
    }

    #[test]
    fn rejects_asymmetric_hessian() {
        let s2 = Matrix::from_rows(&[[1.0, 0.0], [1e-6, 1.0]]).unwrap();
        assert!(matches!(posterior_second_moment(&[0.0, 0.0], &s2, &[0.0, 0.0], 1.0), Err(Error::Asymmetric(_))));
        assert!(posterior_cov(&s2, 1.0).is_err());
    }

    #[test]
    fn recursion_matches_closed_forms() {
        let q = Distribution::standard_normal(2).unwrap().noisy(0.8).unwrap().unwrap();
        let s1 = |x: &[f64]| q.s1(x);
        let s2 = |x: &[f64]| q.s2(x);
        let fd_only = ScoreOracle { s1: &s1, s2: None };
        let analytic = ScoreOracle { s1: &s1, s2: Some(&s2) };
        let xt = [0.7, -1.1];
        let m1 = moment_recursion(1, &xt, 0.8, &fd_only, false).unwrap();
        close(&m1, &tweedie_mean(&q.s1(&xt).unwrap(), &xt, 0.8).unwrap(), 0.0);
        let want = posterior_second_moment(&q.s1(&xt).unwrap(), &q.s2(&xt).unwrap(), &xt, 0.8).unwrap();
        close(&moment_recursion(2, &xt, 0.8, &fd_only, false).unwrap(), want.as_slice(), 1e-8);
        close(&moment_recursion(2, &xt, 0.8, &analytic, false).unwrap(), want.as_slice(), 0.0);
    }

    #[test]
    fn third_moment_matches_quadrature() {
        let q = Distribution::standard_normal(1).unwrap().noisy(1.0).unwrap().unwrap();
        let s1 = |x: &[f64]| q.s1(x);
        let s2 = |x: &[f64]| q.s2(x);
        let oracle = ScoreOracle { s1: &s1, s2: Some(&s2) };
        let xt = 2.0;
        let got = moment_recursion(3, &[xt], 1.0, &oracle, false).unwrap()[0];
        // Posterior ∝ N(x; 0, 1) N(x̃; x, 1), integrated by Simpson's rule.
        let (a, b, n) = (-12.0, 14.0, 20_000);
        let h = (b - a) / n as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..=n {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            let p = (-0.5 * x * x - 0.5 * (xt - x) * (xt - x)).exp();
            num += w * x.powi(3) * p;
            den += w * p;
        }
        let want = num / den;
        assert!(((got - want) / want).abs() < 1e-4, "{got} vs {want}");
    }

    #[test]
    fn order_guard() {
        let s1 = |x: &[f64]| Ok(x.iter().map(|v| -v).collect());
        let oracle = ScoreOracle { s1: &s1, s2: None };
        assert!(moment_recursion(4, &[0.1], 1.0, &oracle, false).is_err());
        assert_eq!(moment_recursion(4, &[0.1], 1.0, &oracle, true).unwrap().len(), 1);
        assert!(moment_recursion(0, &[0.1], 1.0, &oracle, false).is_err());
    }
}
