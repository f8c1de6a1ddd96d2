//! Explanation-instability measures.
//!
//! * Lipschitz estimates: the slope norm of the point's own surrogate, and
//!   mean/max/quantile of pairwise difference quotients over perturbations.
//! * Jaccard top-k overlap of the most important features across replicate
//!   surrogates fitted at perturbed copies of the point.
//! * The slope-covariance decomposition: with the replicate slopes stacked as
//!   rows of `B` and `S` their sample covariance,
//!   `I_mag = tr(S) / mean ||beta_i||^2`, `I_cpl = ||S - diag S||_F / ||S||_F`,
//!   `I_overall = I_mag * I_cpl`, with stabilities `1 / (1 + I_mag)` and
//!   `1 - I_cpl`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EvalPoint, Model};
use crate::sampling::{derive_seed, sample_perturbations, squared_distance, stream, PerturbationConfig};
use crate::surrogate::{fit_local_surrogate, LocalSurrogate};
use crate::uncertainty::quantile_sorted;

/// Pairs closer than this are skipped by the finite-difference estimator.
pub const MIN_PAIR_DISTANCE: f64 = 1e-12;
/// Mean squared slope below which `I_mag` is reported as 0 and flagged.
pub const FLAT_SLOPE_GUARD: f64 = 1e-24;

/// Surrogates fitted at perturbed copies of one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateEnsemble {
    pub center: EvalPoint,
    pub replicate_centers: Vec<EvalPoint>,
    pub surrogates: Vec<LocalSurrogate>,
    /// Row `i` is `surrogates[i].beta`.
    pub slopes: Vec<Vec<f64>>,
}

impl ReplicateEnsemble {
    /// Assembles an ensemble from fitted surrogates.
    pub fn from_surrogates(center: EvalPoint, surrogates: Vec<LocalSurrogate>) -> Result<Self> {
        if surrogates.len() < 2 {
            return Err(Error::TooFewSamples {
                required: 2,
                actual: surrogates.len(),
            });
        }
        if let Some(s) = surrogates.iter().find(|s| s.dim() != center.dim()) {
            return Err(Error::Dimension {
                expected: center.dim(),
                actual: s.dim(),
            });
        }
        Ok(ReplicateEnsemble {
            replicate_centers: surrogates.iter().map(|s| s.center.clone()).collect(),
            slopes: surrogates.iter().map(|s| s.beta.clone()).collect(),
            center,
            surrogates,
        })
    }

    pub fn len(&self) -> usize {
        self.slopes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slopes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.center.dim()
    }
}

/// Fits `replicates` surrogates, each at `center + eps_m` with
/// `eps_m ~ N(0, sigma_pert^2 I)` and its own `cfg.count` samples.
pub fn build_replicate_ensemble<M: Model + ?Sized>(
    model: &M,
    center: &EvalPoint,
    cfg: &PerturbationConfig,
    replicates: usize,
) -> Result<ReplicateEnsemble> {
    if replicates < 2 {
        return Err(Error::TooFewSamples {
            required: 2,
            actual: replicates,
        });
    }
    cfg.validate_for_fit(center.dim())?;
    let centers_cfg = cfg
        .with_count(replicates)
        .with_seed(derive_seed(cfg.seed, &[stream::REPLICATE_CENTERS]));
    let centers = sample_perturbations(center, &centers_cfg);
    let surrogates = centers
        .iter()
        .enumerate()
        .map(|(m, c)| {
            let fit_cfg = cfg.with_seed(derive_seed(cfg.seed, &[stream::REPLICATE_FIT, m as u64]));
            fit_local_surrogate(model, c, &fit_cfg).map_err(|e| Error::Replicate {
                replicate: m,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ReplicateEnsemble::from_surrogates(center.clone(), surrogates)
}

/// Summary statistic for the pairwise difference quotients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdMode {
    Mean,
    Max,
    Quantile(f64),
}

/// `|f(x_j) - f(x_k)| / ||x_j - x_k||` summarized over all sample pairs.
pub fn lipschitz_finite_difference<M: Model + ?Sized>(
    model: &M,
    samples: &[EvalPoint],
    mode: FdMode,
) -> Result<f64> {
    let values = model.eval_batch(samples)?;
    lipschitz_from_values(samples, &values, mode)
}

/// As [`lipschitz_finite_difference`] for already-evaluated samples.
pub fn lipschitz_from_values(samples: &[EvalPoint], values: &[f64], mode: FdMode) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            required: 2,
            actual: samples.len(),
        });
    }
    if values.len() != samples.len() {
        return Err(Error::Dimension {
            expected: samples.len(),
            actual: values.len(),
        });
    }
    let mut quotients = Vec::with_capacity(samples.len() * (samples.len() - 1) / 2);
    for j in 0..samples.len() {
        for k in j + 1..samples.len() {
            let dist = squared_distance(samples[j].coords(), samples[k].coords()).sqrt();
            if dist < MIN_PAIR_DISTANCE {
                continue;
            }
            quotients.push((values[j] - values[k]).abs() / dist);
        }
    }
    if quotients.is_empty() {
        return Err(Error::DegeneratePairs(samples.len() * (samples.len() - 1) / 2));
    }
    Ok(match mode {
        FdMode::Mean => quotients.iter().sum::<f64>() / quotients.len() as f64,
        FdMode::Max => quotients.iter().copied().fold(0.0, f64::max),
        FdMode::Quantile(p) => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("quantile level {p} outside [0, 1]")));
            }
            quotients.sort_by(f64::total_cmp);
            quantile_sorted(&quotients, p)
        }
    })
}

/// Indices of the `k` largest `|beta_j|`, ties going to the lower index.
/// Returned in ascending index order.
pub fn top_k_features(beta: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..beta.len()).collect();
    // stable sort keeps lower indices first among equal magnitudes
    idx.sort_by(|&a, &b| beta[b].abs().total_cmp(&beta[a].abs()));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// `|A ∩ B| / |A ∪ B|` for sets given as ascending index lists.
pub fn jaccard_index(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Average Jaccard index over all unordered pairs of sets.
pub fn average_pairwise_jaccard(sets: &[Vec<usize>]) -> f64 {
    let m = sets.len();
    let mut total = 0.0;
    for a in 0..m {
        for b in a + 1..m {
            total += jaccard_index(&sets[a], &sets[b]);
        }
    }
    2.0 * total / (m * (m - 1)) as f64
}

/// Average pairwise top-`k` Jaccard overlap across the ensemble's slopes.
pub fn jaccard_topk(ensemble: &ReplicateEnsemble, k: usize) -> Result<f64> {
    if k == 0 || k > ensemble.dim() {
        return Err(Error::config(format!(
            "top-k must lie in 1..={}, got {k}",
            ensemble.dim()
        )));
    }
    if ensemble.len() < 2 {
        return Err(Error::TooFewSamples {
            required: 2,
            actual: ensemble.len(),
        });
    }
    let sets: Vec<Vec<usize>> = ensemble.slopes.iter().map(|b| top_k_features(b, k)).collect();
    Ok(average_pairwise_jaccard(&sets))
}

/// The slope-covariance instability decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianInstability {
    pub magnitude: f64,
    pub magnitude_stability: f64,
    pub coupling: f64,
    pub coupling_stability: f64,
    pub overall: f64,
    /// Sample covariance of the slope rows (`1 / (m - 1)` normalization).
    pub slope_covariance: Vec<Vec<f64>>,
    /// Set when the mean squared slope is too small for `magnitude` to be
    /// defined; `magnitude` is then reported as 0.
    pub degenerate: bool,
}

pub fn hessian_instability(ensemble: &ReplicateEnsemble) -> Result<HessianInstability> {
    hessian_from_slopes(&ensemble.slopes)
}

/// Computes the decomposition from slope rows.
pub fn hessian_from_slopes(slopes: &[Vec<f64>]) -> Result<HessianInstability> {
    let m = slopes.len();
    if m < 2 {
        return Err(Error::TooFewSamples {
            required: 2,
            actual: m,
        });
    }
    let n = slopes[0].len();
    if let Some(r) = slopes.iter().find(|r| r.len() != n) {
        return Err(Error::Dimension {
            expected: n,
            actual: r.len(),
        });
    }
    if slopes.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("slope matrix"));
    }
    // mean taken relative to the first row, so identical rows centre to exactly zero
    let first = &slopes[0];
    let mean: Vec<f64> = (0..n)
        .map(|j| first[j] + slopes.iter().map(|r| r[j] - first[j]).sum::<f64>() / m as f64)
        .collect();
    let centered: Vec<Vec<f64>> = slopes
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, mu)| v - mu).collect())
        .collect();
    let mut cov = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let s = centered.iter().map(|r| r[i] * r[j]).sum::<f64>() / (m - 1) as f64;
            cov[i][j] = s;
            cov[j][i] = s;
        }
    }
    let trace: f64 = (0..n).map(|i| cov[i][i]).sum();
    let mean_sq: f64 = slopes
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / m as f64;
    let degenerate = mean_sq < FLAT_SLOPE_GUARD;
    let magnitude = if degenerate { 0.0 } else { trace / mean_sq };
    let total_sq: f64 = cov.iter().flatten().map(|v| v * v).sum();
    let diag_sq: f64 = (0..n).map(|i| cov[i][i] * cov[i][i]).sum();
    let coupling = if total_sq > 0.0 {
        ((total_sq - diag_sq).max(0.0) / total_sq).sqrt().min(1.0)
    } else {
        0.0
    };
    Ok(HessianInstability {
        magnitude,
        magnitude_stability: 1.0 / (1.0 + magnitude),
        coupling,
        coupling_stability: 1.0 - coupling,
        overall: magnitude * coupling,
        slope_covariance: cov,
        degenerate,
    })
}

/// All instability measures at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstabilityReport {
    pub center: EvalPoint,
    pub lipschitz_surrogate: f64,
    pub lipschitz_fd_mean: f64,
    pub lipschitz_fd_max: f64,
    pub jaccard_avg: f64,
    pub hessian_mag: f64,
    pub hessian_mag_stability: f64,
    pub hessian_cpl: f64,
    pub hessian_cpl_stability: f64,
    pub hessian_overall: f64,
    pub hessian_degenerate: bool,
    pub topk: usize,
    pub replicates: usize,
}
