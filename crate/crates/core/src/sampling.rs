//! Seeded Gaussian perturbations, kernel weights and feature standardization.
//!
//! Random streams are ChaCha8 generators keyed by a 64-bit seed; normal
//! variates come from the ziggurat sampler in `rand_distr`. Sub-streams for a
//! given evaluation point, replicate or purpose are obtained with
//! [`derive_seed`], so results never depend on the order in which points are
//! processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EvalPoint;

/// Default perturbation scale, in standardized-feature units.
pub const DEFAULT_SIGMA_PERT: f64 = 0.3;
/// Default width of the Gaussian locality kernel.
pub const DEFAULT_KERNEL_SIGMA: f64 = 0.75;
/// Default number of samples per local surrogate fit.
pub const DEFAULT_SURROGATE_SAMPLES: usize = 200;
/// Default number of replicates (and conformal perturbations).
pub const DEFAULT_REPLICATES: usize = 25;

/// Scale, count and seed of one batch of Gaussian perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub sigma_pert: f64,
    pub count: usize,
    pub kernel_sigma: f64,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            sigma_pert: DEFAULT_SIGMA_PERT,
            count: DEFAULT_SURROGATE_SAMPLES,
            kernel_sigma: DEFAULT_KERNEL_SIGMA,
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    pub fn new(sigma_pert: f64, count: usize, kernel_sigma: f64, seed: u64) -> Self {
        PerturbationConfig {
            sigma_pert,
            count,
            kernel_sigma,
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        PerturbationConfig { seed, ..self }
    }

    pub fn with_count(self, count: usize) -> Self {
        PerturbationConfig { count, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_pert.is_finite() && self.sigma_pert > 0.0) {
            return Err(Error::config(format!(
                "sigma_pert must be finite and positive, got {}",
                self.sigma_pert
            )));
        }
        if !(self.kernel_sigma.is_finite() && self.kernel_sigma > 0.0) {
            return Err(Error::config(format!(
                "kernel_sigma must be finite and positive, got {}",
                self.kernel_sigma
            )));
        }
        if self.count < 2 {
            return Err(Error::TooFewSamples {
                required: 2,
                actual: self.count,
            });
        }
        Ok(())
    }

    /// Validation for configurations that feed a surrogate fit in `dim`
    /// features: the weighted system must be overdetermined.
    pub fn validate_for_fit(&self, dim: usize) -> Result<()> {
        self.validate()?;
        if self.count < dim + 2 {
            return Err(Error::TooFewSamples {
                required: dim + 2,
                actual: self.count,
            });
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of integer tags into an independent seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Stream tags used with [`derive_seed`].
pub mod stream {
    pub const EVAL_POINTS: u64 = 1;
    pub const SURROGATE: u64 = 2;
    pub const CONFORMAL: u64 = 3;
    pub const REPLICATE_CENTERS: u64 = 4;
    pub const REPLICATE_FIT: u64 = 5;
    pub const MODEL_PARAMS: u64 = 6;
}

/// The toolkit's random generator for a seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fills `n` standard normal variates from a seeded stream.
pub fn standard_normals(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `cfg.count` points `center + eps`, `eps ~ N(0, sigma_pert^2 I)`.
pub fn sample_perturbations(center: &EvalPoint, cfg: &PerturbationConfig) -> Vec<EvalPoint> {
    let dim = center.dim();
    let mut rng = rng_from_seed(cfg.seed);
    (0..cfg.count)
        .map(|_| {
            let coords = center
                .coords()
                .iter()
                .map(|&c| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    c + cfg.sigma_pert * e
                })
                .collect::<Vec<_>>();
            debug_assert_eq!(coords.len(), dim);
            EvalPoint::from_vec_unchecked(coords)
        })
        .collect()
}

/// Draws `n` points i.i.d. from `N(0, I_dim)`.
pub fn sample_unit_normal_points(dim: usize, n: usize, seed: u64) -> Vec<EvalPoint> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            EvalPoint::from_vec_unchecked(
                (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
            )
        })
        .collect()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gaussian locality weights `exp(-||z - center||^2 / kernel_sigma^2)`.
pub fn kernel_weights(center: &EvalPoint, samples: &[EvalPoint], kernel_sigma: f64) -> Vec<f64> {
    let s2 = kernel_sigma * kernel_sigma;
    samples
        .iter()
        .map(|z| (-squared_distance(z.coords(), center.coords()) / s2).exp())
        .collect()
}

/// Column means and sample standard deviations of a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub means: Vec<f64>,
    pub deviations: Vec<f64>,
}

impl StandardizationStats {
    pub fn dim(&self) -> usize {
        self.means.len()
    }

    /// Identity transform in `dim` features.
    pub fn identity(dim: usize) -> Self {
        StandardizationStats {
            means: vec![0.0; dim],
            deviations: vec![1.0; dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.len() != self.deviations.len() {
            return Err(Error::Dimension {
                expected: self.means.len(),
                actual: self.deviations.len(),
            });
        }
        for (j, (&m, &d)) in self.means.iter().zip(&self.deviations).enumerate() {
            if !m.is_finite() || !d.is_finite() {
                return Err(Error::NonFinite("standardization statistics"));
            }
            if d <= 0.0 {
                return Err(Error::DegenerateFeature { column: j });
            }
        }
        Ok(())
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.means.iter().zip(&self.deviations))
            .map(|(&x, (&m, &d))| (x - m) / d)
            .collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.means.iter().zip(&self.deviations))
            .map(|(&z, (&m, &d))| z * d + m)
            .collect()
    }
}

/// Standardizes each column to sample mean 0 and sample SD 1 (n-1 convention).
pub fn standardize(rows: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, StandardizationStats)> {
    if rows.len() < 2 {
        return Err(Error::TooFewSamples {
            required: 2,
            actual: rows.len(),
        });
    }
    let dim = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            actual: bad.len(),
        });
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dataset"));
    }
    let n = rows.len() as f64;
    let mut means = vec![0.0; dim];
    for r in rows {
        for (m, v) in means.iter_mut().zip(r) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut deviations = vec![0.0; dim];
    for r in rows {
        for ((d, v), m) in deviations.iter_mut().zip(r).zip(&means) {
            *d += (v - m) * (v - m);
        }
    }
    for (j, d) in deviations.iter_mut().enumerate() {
        *d = (*d / (n - 1.0)).sqrt();
        if *d <= f64::EPSILON * means[j].abs().max(1.0) {
            return Err(Error::DegenerateFeature { column: j });
        }
    }
    let stats = StandardizationStats { means, deviations };
    let out = rows.iter().map(|r| stats.apply(r)).collect();
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(v: &[f64]) -> EvalPoint {
        EvalPoint::new(v.to_vec()).unwrap()
    }

    #[test]
    fn tiny_sigma_collapses_to_center() {
        let c = point(&[0.3, -1.2, 4.0]);
        let cfg = PerturbationConfig::new(1e-12, 50, 1.0, 9);
        for s in sample_perturbations(&c, &cfg) {
            for (a, b) in s.coords().iter().zip(c.coords()) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn per_axis_sd_matches_sigma() {
        let c = point(&[0.0, 5.0]);
        let cfg = PerturbationConfig::new(1.0, 10_000, 1.0, 42);
        let s = sample_perturbations(&c, &cfg);
        for axis in 0..2 {
            let xs: Vec<f64> = s.iter().map(|p| p.coords()[axis]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
                / (xs.len() - 1) as f64)
                .sqrt();
            assert!((0.97..=1.03).contains(&sd), "axis {axis}: sd {sd}");
            assert!((mean - c.coords()[axis]).abs() < 0.05);
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let c = point(&[1.0, 2.0]);
        let cfg = PerturbationConfig::new(0.5, 20, 1.0, 77);
        assert_eq!(sample_perturbations(&c, &cfg), sample_perturbations(&c, &cfg));
        let other = sample_perturbations(&c, &cfg.with_seed(78));
        assert_ne!(sample_perturbations(&c, &cfg), other);
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        let a = derive_seed(5, &[stream::SURROGATE, 0]);
        let b = derive_seed(5, &[stream::SURROGATE, 1]);
        let c = derive_seed(5, &[stream::CONFORMAL, 0]);
        assert!(a != b && a != c && b != c);
        assert_eq!(a, derive_seed(5, &[stream::SURROGATE, 0]));
    }

    #[test]
    fn kernel_weight_values() {
        let c = point(&[1.0, 1.0]);
        let s = vec![point(&[1.0, 1.0]), point(&[1.0 + 0.75, 1.0]), point(&[3.0, 3.0])];
        let w = kernel_weights(&c, &s, 0.75);
        assert_eq!(w[0], 1.0);
        assert!((w[1] - 0.367_879_441_2).abs() < 1e-10);
        assert!(w[2] < w[1] && w[2] > 0.0);
    }

    #[test]
    fn two_point_column() {
        let (z, stats) = standardize(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(stats.means, vec![1.0]);
        assert!((stats.deviations[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!((z[0][0] + 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((z[1][0] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_variance_column_is_named() {
        let rows = vec![vec![1.0, 3.0], vec![2.0, 3.0], vec![4.0, 3.0]];
        match standardize(&rows) {
            Err(Error::DegenerateFeature { column }) => assert_eq!(column, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn standardized_columns_have_unit_moments() {
        let pts = sample_unit_normal_points(3, 40, 3);
        let rows: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| p.coords().iter().map(|x| 3.0 * x + 10.0).collect())
            .collect();
        let (z, stats) = standardize(&rows).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = z.iter().map(|r| r[j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 39.0).sqrt();
            assert!(mean.abs() <= 1e-10);
            assert!((sd - 1.0).abs() <= 1e-10);
        }
        for (r, zr) in rows.iter().zip(&z) {
            for (a, b) in r.iter().zip(stats.invert(zr)) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
        // standardizing standardized data is the identity
        let (z2, _) = standardize(&z).unwrap();
        for (a, b) in z.iter().flatten().zip(z2.iter().flatten()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
