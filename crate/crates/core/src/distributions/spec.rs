use super::{Distribution, GaussianMixture, LogisticMixture};
use crate::error::{invalid, Result};
use crate::linalg::Matrix;
use crate::rng::{seeded, standard_normal_matrix};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Serializable description of a [`Distribution`], the `[distribution]`
/// section of an experiment config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DistributionSpec {
    Gaussian {
        dim: usize,
        #[serde(default)]
        mean: Option<Vec<f64>>,
        #[serde(default)]
        cov: GaussianCovSpec,
    },
    TwoMode {
        center: Vec<f64>,
    },
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        std: f64,
    },
    Ring {
        components: usize,
        radius: f64,
        std: f64,
    },
    Checker {
        n: usize,
        spacing: f64,
        std: f64,
    },
    /// Seeded random mixture: weights, locations in `±location_range`,
    /// scales in `[scale_min, scale_max]`.
    LogisticMixture {
        dim: usize,
        components: usize,
        seed: u64,
        location_range: f64,
        scale_min: f64,
        scale_max: f64,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GaussianCovSpec {
    #[default]
    Identity,
    Explicit {
        rows: Vec<Vec<f64>>,
    },
    /// `Q diag(λ) Qᵀ` with Haar-random `Q` and eigenvalues geometrically
    /// spaced from 1 down to `1 / condition`.
    RandomSpd {
        seed: u64,
        condition: f64,
    },
}

pub fn random_spd(dim: usize, condition: f64, seed: u64) -> Result<Matrix> {
    if !(condition >= 1.0) {
        return Err(invalid(format!("condition number must be >= 1, got {condition}")));
    }
    let mut rng = seeded(seed);
    let g = standard_normal_matrix(&mut rng, dim, dim).to_nalgebra();
    let qr = g.qr();
    let mut q = qr.q();
    // Sign fix so Q is Haar distributed.
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let eig: Vec<f64> = (0..dim)
        .map(|i| {
            let t = if dim > 1 { i as f64 / (dim - 1) as f64 } else { 0.0 };
            condition.powf(-t)
        })
        .collect();
    let lam = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eig));
    let cov = &q * lam * q.transpose();
    Ok(Matrix::from_nalgebra(&cov).symmetrized())
}

impl DistributionSpec {
    pub fn build(&self) -> Result<Distribution> {
        match self {
            Self::Gaussian { dim, mean, cov } => {
                let mean = mean.clone().unwrap_or_else(|| vec![0.0; *dim]);
                let cov = match cov {
                    GaussianCovSpec::Identity => Matrix::identity(*dim),
                    GaussianCovSpec::Explicit { rows } => Matrix::from_rows(rows)?,
                    GaussianCovSpec::RandomSpd { seed, condition } => random_spd(*dim, *condition, *seed)?,
                };
                Distribution::gaussian(mean, cov)
            }
            Self::TwoMode { center } => Distribution::two_mode(center.clone()),
            Self::GaussianMixture { weights, means, std } => {
                let d = means.first().map_or(0, Vec::len);
                Ok(Distribution::GaussianMixture(GaussianMixture::new(
                    weights.clone(),
                    means.clone(),
                    Matrix::identity(d).scale(std * std),
                )?))
            }
            Self::Ring { components, radius, std } => Distribution::ring(*components, *radius, *std),
            Self::Checker { n, spacing, std } => Distribution::checker(*n, *spacing, *std),
            Self::LogisticMixture {
                dim,
                components,
                seed,
                location_range,
                scale_min,
                scale_max,
            } => {
                if *components == 0 || *dim == 0 || !(scale_min > &0.0) || scale_max < scale_min {
                    return Err(invalid("logistic mixture needs dim, components > 0 and 0 < scale_min <= scale_max"));
                }
                let mut rng = seeded(*seed);
                let raw: Vec<f64> = (0..*components).map(|_| rng.random_range(0.5..1.5)).collect();
                let total: f64 = raw.iter().sum();
                let weights = raw.iter().map(|w| w / total).collect();
                let locations = (0..*components)
                    .map(|_| (0..*dim).map(|_| rng.random_range(-location_range..=*location_range)).collect())
                    .collect();
                let scales = (0..*components)
                    .map(|_| (0..*dim).map(|_| rng.random_range(*scale_min..=*scale_max)).collect())
                    .collect();
                Ok(Distribution::LogisticMixture(LogisticMixture::new(weights, locations, scales)?))
            }
        }
    }
}
