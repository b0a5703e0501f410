use hosm_core::distributions::Distribution;
use hosm_core::uq::*;
use hosm_core::Matrix;
use proptest::prelude::*;

/// `Var(x | x̃)` for a 1-d density by trapezoidal quadrature.
fn quadrature_posterior_var(dist: &Distribution, noisy: f64, sigma: f64) -> f64 {
    let (lo, hi, n) = (-15.0, 15.0, 30_000);
    let h = (hi - lo) / n as f64;
    let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        let p = w * (dist.log_density(&[x]).unwrap() - 0.5 * ((noisy - x) / sigma).powi(2)).exp();
        m0 += p;
        m1 += p * x;
        m2 += p * x * x;
    }
    m2 / m0 - (m1 / m0).powi(2)
}

fn analytic_summary(dist: &Distribution, x: &[f64], sigma: f64) -> PosteriorSummary {
    let noisy = dist.noisy(sigma).unwrap().unwrap();
    let sc = noisy.scores(x).unwrap();
    denoise_with_scores(x, &sc.s1, &sc.s2, sigma, x.len()).unwrap()
}

#[test]
fn two_mode_midpoint_is_more_uncertain() {
    let dist = Distribution::two_mode(vec![3.0]).unwrap();
    let sigma = 1.0;
    let mid = analytic_summary(&dist, &[0.0], sigma);
    let mode = analytic_summary(&dist, &[3.0], sigma);
    let (qm, qc) = (
        quadrature_posterior_var(&dist, 0.0, sigma),
        quadrature_posterior_var(&dist, 3.0, sigma),
    );
    assert!((mid.diag[0] - qm).abs() < 1e-6, "{} vs {qm}", mid.diag[0]);
    assert!((mode.diag[0] - qc).abs() < 1e-6, "{} vs {qc}", mode.diag[0]);
    assert!(mid.diag[0] > mode.diag[0]);
    assert!(qm > qc);
}

#[test]
fn gaussian_posterior_is_exact() {
    let cov = Matrix::from_rows(&[[2.0, 0.6], [0.6, 1.0]]).unwrap();
    let mean = vec![0.5, -1.0];
    let dist = Distribution::gaussian(mean.clone(), cov.clone()).unwrap();
    let sigma = 0.7;
    let x = [1.2, 0.3];
    let s = analytic_summary(&dist, &x, sigma);
    // Conditioning: K = Σ (Σ + σ²I)⁻¹, mean μ + K(x̃ − μ), cov Σ − KΣ.
    let v2 = sigma * sigma;
    let mut tot = cov.to_nalgebra();
    for i in 0..2 {
        tot[(i, i)] += v2;
    }
    let k = cov.to_nalgebra() * tot.try_inverse().unwrap();
    let diff = nalgebra::DVector::from_vec(vec![x[0] - mean[0], x[1] - mean[1]]);
    let m = nalgebra::DVector::from_vec(mean) + &k * diff;
    let c = cov.to_nalgebra() - &k * cov.to_nalgebra();
    for i in 0..2 {
        assert!((s.mean[i] - m[i]).abs() < 1e-10);
        for j in 0..2 {
            assert!((s.cov[i][j] - c[(i, j)]).abs() < 1e-10);
        }
    }
}

#[test]
fn trace_grows_with_noise() {
    let cov = Matrix::from_rows(&[[1.5, 0.2], [0.2, 0.5]]).unwrap();
    let dist = Distribution::gaussian(vec![0.0, 0.0], cov).unwrap();
    let mut prev = 0.0;
    for sigma in [0.05, 0.1, 0.3, 0.5, 1.0, 2.0] {
        let t = analytic_summary(&dist, &[0.4, -0.2], sigma).trace();
        assert!(t > prev, "sigma {sigma}: {t} <= {prev}");
        prev = t;
    }
}

#[test]
fn random_spd_reconstructs_from_eigenpairs() {
    let m = hosm_core::distributions::random_spd(10, 50.0, 4).unwrap();
    let pairs = eigvecs_topk(&m, 10).unwrap();
    let mut r = Matrix::zeros(10, 10);
    for p in &pairs {
        r.add_assign(&Matrix::outer(&p.vector, &p.vector).scale(p.value)).unwrap();
        let n: f64 = p.vector.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
    assert!(r.sub(&m).unwrap().max_abs() < 1e-8);
    assert!(pairs.windows(2).all(|w| w[0].value >= w[1].value));
}

#[test]
fn samples_match_covariance() {
    let s = summarize(&[0.0, 0.0], 1.0, vec![0.0, 0.0], &Matrix::identity(2).scale(0.5), 2).unwrap();
    let n = 100_000;
    let x = gaussian_posterior_sample(&s, n, 1).unwrap();
    let mut c = [[0.0; 2]; 2];
    for r in x.row_iter() {
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] += r[i] * r[j] / n as f64;
            }
        }
    }
    assert!((c[0][0] / 0.5 - 1.0).abs() < 0.03 && (c[1][1] / 0.5 - 1.0).abs() < 0.03);
    assert!(c[0][1].abs() < 0.015);
}

#[test]
fn rank_deficient_samples_stay_in_span() {
    let b = [0.6, 0.8, 0.0];
    let raw = Matrix::outer(&b, &b).scale(2.0);
    let mean = vec![1.0, -1.0, 0.5];
    let s = summarize(&[0.0; 3], 1.0, mean.clone(), &raw, 1).unwrap();
    let x = gaussian_posterior_sample(&s, 200, 3).unwrap();
    for r in x.row_iter() {
        let d: Vec<f64> = r.iter().zip(&mean).map(|(a, m)| a - m).collect();
        let along: f64 = d.iter().zip(&b).map(|(p, q)| p * q).sum();
        let resid: f64 = d.iter().zip(&b).map(|(p, q)| (p - along * q).powi(2)).sum::<f64>().sqrt();
        assert!(resid < 1e-8, "{resid}");
    }
}

#[test]
fn sigma_mismatch_is_flagged() {
    let cfg = hosm_core::models::ModelConfig {
        hidden_s1: 8,
        hidden_s2: 8,
        ..Default::default()
    };
    let pair = hosm_core::models::ScoreModelPair::init(2, &cfg, 0.5, 0).unwrap();
    assert!(denoise_with_uq(&pair, &[0.1, 0.2], 0.5, 2).unwrap().warnings.iter().all(|w| !w.contains("trained")));
    let s = denoise_with_uq(&pair, &[0.1, 0.2], 0.3, 2).unwrap();
    assert!(s.warnings[0].contains("trained at sigma 0.5"));
    assert!(denoise_with_uq(&pair, &[0.1], 0.5, 1).is_err());
}

proptest! {
    #[test]
    fn summary_invariants(vals in proptest::collection::vec(-3.0f64..3.0, 9), mean in proptest::collection::vec(-2.0f64..2.0, 3)) {
        let raw = Matrix::from_vec(3, 3, vals).unwrap();
        let s = summarize(&[0.0; 3], 1.0, mean, &raw, 3).unwrap();
        let c = s.cov_matrix();
        prop_assert!(c.max_asymmetry() == 0.0);
        prop_assert_eq!(c.diagonal(), s.diag.clone());
        prop_assert!(s.post_spectrum.iter().all(|v| *v >= 0.0));
        prop_assert!(s.pre_spectrum.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.top_eigen.windows(2).all(|w| w[0].value >= w[1].value));
        let min = c.to_nalgebra().symmetric_eigen().eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
        prop_assert!(min > -1e-12);
    }
}
