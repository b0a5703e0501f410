use serde::{Deserialize, Serialize};

/// Mixing diagnostics over all retained draws of all chains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssReport {
    pub per_dim: Vec<f64>,
    pub min_ess: f64,
    /// Last lag included in each dimension's autocorrelation sum.
    pub cutoff_lags: Vec<usize>,
    /// Retained draws summed over chains; the upper bound for every ESS.
    pub draws: usize,
}

/// Multi-chain ESS per dimension. `draws` is laid out `[t][chain][dim]` with
/// `n` retained steps. Autocovariances are direct sums up to lag `n / 10`,
/// combined across chains as in Stan's multi-chain estimator (no chain
/// splitting or rank normalization), and truncated by Geyer's initial
/// positive then initial monotone sequence rules. Results are clamped to `[1, chains·n]`.
pub fn effective_sample_size(draws: &[f64], n: usize, chains: usize, dim: usize) -> EssReport {
    assert_eq!(draws.len(), n * chains * dim, "draw array shape");
    let total = n * chains;
    let mut per_dim = Vec::with_capacity(dim);
    let mut cutoff_lags = Vec::with_capacity(dim);
    for d in 0..dim {
        let series: Vec<Vec<f64>> = (0..chains)
            .map(|c| (0..n).map(|t| draws[(t * chains + c) * dim + d]).collect())
            .collect();
        let (ess, lag) = ess_one(&series);
        per_dim.push(ess.clamp(1.0, total.max(1) as f64));
        cutoff_lags.push(lag);
    }
    let min_ess = per_dim.iter().cloned().fold(f64::INFINITY, f64::min);
    EssReport {
        per_dim,
        min_ess: if dim == 0 { 0.0 } else { min_ess },
        cutoff_lags,
        draws: total,
    }
}

fn autocov(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    (0..=max_lag)
        .map(|t| c[..n - t].iter().zip(&c[t..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
        .collect()
}

fn ess_one(chains: &[Vec<f64>]) -> (f64, usize) {
    let m = chains.len();
    let n = chains[0].len();
    let total = (m * n) as f64;
    if n < 4 {
        return (total, 0);
    }
    let max_lag = (n / 10).max(1);
    let acov: Vec<Vec<f64>> = chains.iter().map(|c| autocov(c, max_lag)).collect();
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / nf).collect();
    let w = acov.iter().map(|a| a[0] * nf / (nf - 1.0)).sum::<f64>() / m as f64;
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = if m > 1 {
        nf * means.iter().map(|v| (v - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0)
    } else {
        0.0
    };
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    if !(var_plus > 0.0) {
        // Constant chains carry no information about mixing.
        return (1.0, 0);
    }
    let rho = |t: usize| -> f64 {
        let mean_acov = acov.iter().map(|a| a[t]).sum::<f64>() / m as f64;
        1.0 - (w - mean_acov) / var_plus
    };

    // Pairs Γ_k = ρ_{2k} + ρ_{2k+1}; keep while positive, force monotone.
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut cutoff = 0;
    let mut k = 0;
    while 2 * k + 1 <= max_lag {
        let mut g = rho(2 * k) + rho(2 * k + 1);
        if g <= 0.0 {
            break;
        }
        g = g.min(prev);
        prev = g;
        sum += g;
        cutoff = 2 * k + 1;
        k += 1;
    }
    let tau = (-1.0 + 2.0 * sum).max(1.0 / total);
    (total / tau, cutoff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, standard_normal_vec};

    #[test]
    fn iid_draws_give_full_ess() {
        let (n, c, d) = (2000, 8, 3);
        let draws = standard_normal_vec(&mut seeded(5), n * c * d);
        let r = effective_sample_size(&draws, n, c, d);
        for e in &r.per_dim {
            assert!((e / (n * c) as f64 - 1.0).abs() < 0.1, "{e}");
        }
        assert_eq!(r.draws, n * c);
    }

    #[test]
    fn ar1_matches_theory() {
        // AR(1) with coefficient φ has ESS / N = (1 − φ) / (1 + φ).
        let (n, c, phi) = (20_000, 4, 0.8);
        let noise = standard_normal_vec(&mut seeded(6), n * c);
        let mut draws = vec![0.0; n * c];
        for ch in 0..c {
            let mut x = 0.0;
            for t in 0..n {
                x = phi * x + (1.0 - phi * phi as f64).sqrt() * noise[t * c + ch];
                draws[t * c + ch] = x;
            }
        }
        let r = effective_sample_size(&draws, n, c, 1);
        let want = (n * c) as f64 * (1.0 - phi) / (1.0 + phi);
        assert!((r.min_ess / want - 1.0).abs() < 0.15, "{} vs {want}", r.min_ess);
    }

    #[test]
    fn bounds_hold_for_degenerate_chains() {
        let r = effective_sample_size(&vec![1.0; 100 * 2], 100, 2, 1);
        assert!(r.min_ess >= 1.0 && r.min_ess <= 200.0);
        // Chains stuck at different values: no mixing at all. The lag cap of
        // n/10 bounds how small the estimate can get.
        let mut draws = vec![0.0; 100 * 2];
        for t in 0..100 {
            draws[t * 2 + 1] = 5.0 + 1e-3 * (t % 2) as f64;
            draws[t * 2] = 1e-3 * (t % 3) as f64;
        }
        let r = effective_sample_size(&draws, 100, 2, 1);
        assert!(r.min_ess >= 1.0 && r.min_ess < 0.1 * r.draws as f64, "{}", r.min_ess);
    }
}
