//! Local linear surrogates fitted by weighted least squares.
//!
//! Around a query point `x0` the model is sampled at Gaussian perturbations
//! `z_i`, each sample is weighted by the locality kernel, and the affine
//! function `alpha + beta' z` minimizing `sum_i w_i (f(z_i) - alpha - beta' z_i)^2`
//! is computed in closed form from the weighted normal equations. The slope
//! vector `beta` is the explanation; the weighted residuals feed the
//! local-linear uncertainty.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EvalPoint, Model};
use crate::sampling::{kernel_weights, sample_perturbations, PerturbationConfig};

/// Condition number above which the normal matrix is ridged.
pub const RIDGE_CONDITION_LIMIT: f64 = 1e12;
/// Ridge strength relative to `trace / N` of the normal matrix.
pub const RIDGE_SCALE: f64 = 1e-8;

/// How the residual variance behind `coef_covariance` was estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceEstimator {
    /// `WRSS / (sum w - (N + 1) sum w^2 / sum w)`.
    EffectiveDof,
    /// `WRSS / sum w`, used when the effective degrees of freedom vanish.
    WeightSum,
}

/// A fitted local linear surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSurrogate {
    pub center: EvalPoint,
    /// Slopes; the explanation.
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub weights: Vec<f64>,
    /// `f(z_i) - (intercept + beta' z_i)`.
    pub residuals: Vec<f64>,
    /// `sigma^2 (Z'WZ)^{-1}` restricted to the slopes.
    pub coef_covariance: Vec<Vec<f64>>,
    pub residual_variance: f64,
    pub variance_estimator: VarianceEstimator,
    /// Set when the normal matrix needed a ridge term.
    pub ridged: bool,
    /// Seed of the perturbation stream the samples came from.
    pub seed: u64,
    #[serde(skip)]
    pub samples: Vec<EvalPoint>,
    #[serde(skip)]
    pub values: Vec<f64>,
}

impl LocalSurrogate {
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn sample_count(&self) -> usize {
        self.residuals.len()
    }

    pub fn predict(&self, z: &[f64]) -> f64 {
        self.intercept + self.beta.iter().zip(z).map(|(b, v)| b * v).sum::<f64>()
    }

    /// The weighted least-squares objective at the fitted coefficients.
    pub fn objective(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.residuals)
            .map(|(w, r)| w * r * r)
            .sum()
    }
}

/// Samples the model around `center` and fits the local surrogate.
///
/// Requires `cfg.count >= N + 2`.
pub fn fit_local_surrogate<M: Model + ?Sized>(
    model: &M,
    center: &EvalPoint,
    cfg: &PerturbationConfig,
) -> Result<LocalSurrogate> {
    let dim = center.dim();
    if model.dimension() != dim {
        return Err(Error::Dimension {
            expected: model.dimension(),
            actual: dim,
        });
    }
    cfg.validate_for_fit(dim)?;
    let samples = sample_perturbations(center, cfg);
    let values = model.eval_batch(&samples)?;
    let weights = kernel_weights(center, &samples, cfg.kernel_sigma);
    let mut fit = fit_weighted_surrogate(center, samples, values, weights)?;
    fit.seed = cfg.seed;
    Ok(fit)
}

/// Fits the weighted affine model to already-evaluated samples.
pub fn fit_weighted_surrogate(
    center: &EvalPoint,
    samples: Vec<EvalPoint>,
    values: Vec<f64>,
    weights: Vec<f64>,
) -> Result<LocalSurrogate> {
    let n = center.dim();
    let k = samples.len();
    if values.len() != k || weights.len() != k {
        return Err(Error::Dimension {
            expected: k,
            actual: if values.len() != k { values.len() } else { weights.len() },
        });
    }
    if k < n + 2 {
        return Err(Error::TooFewSamples {
            required: n + 2,
            actual: k,
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::NonFinite("kernel weights"));
    }
    let fit = solve_weighted_affine(center.coords(), &samples, &values, &weights)?;
    let sum_w: f64 = weights.iter().sum();
    let sum_w2: f64 = weights.iter().map(|w| w * w).sum();
    let wrss: f64 = weights
        .iter()
        .zip(&fit.residuals)
        .map(|(w, r)| w * r * r)
        .sum();
    let dof = sum_w - (n as f64 + 1.0) * sum_w2 / sum_w;
    let (residual_variance, variance_estimator) = if dof > 0.0 {
        (wrss / dof, VarianceEstimator::EffectiveDof)
    } else {
        (wrss / sum_w, VarianceEstimator::WeightSum)
    };
    let coef_covariance = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    // symmetrize to remove round-off asymmetry
                    let a = fit.inverse[(i + 1, j + 1)];
                    let b = fit.inverse[(j + 1, i + 1)];
                    residual_variance * 0.5 * (a + b)
                })
                .collect()
        })
        .collect();
    Ok(LocalSurrogate {
        center: center.clone(),
        beta: fit.beta,
        intercept: fit.intercept,
        weights,
        residuals: fit.residuals,
        coef_covariance,
        residual_variance,
        variance_estimator,
        ridged: fit.ridged,
        seed: 0,
        samples,
        values,
    })
}

/// Euclidean norm of the surrogate slopes (intercept excluded).
pub fn surrogate_gradient_norm(s: &LocalSurrogate) -> f64 {
    s.beta.iter().map(|b| b * b).sum::<f64>().sqrt()
}

pub(crate) struct AffineSolution {
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Inverse of the (possibly ridged) normal matrix in the centered
    /// parametrization `[1, z - origin]`.
    pub inverse: DMatrix<f64>,
    pub ridged: bool,
}

/// Weighted least squares of `values` on `[1, x - origin]`.
///
/// Regressors are centered at `origin` for conditioning; the returned
/// intercept is for the uncentered parametrization.
pub(crate) fn solve_weighted_affine(
    origin: &[f64],
    samples: &[EvalPoint],
    values: &[f64],
    weights: &[f64],
) -> Result<AffineSolution> {
    let n = origin.len();
    let p = n + 1;
    let mut design = DMatrix::<f64>::zeros(samples.len(), p);
    for (i, z) in samples.iter().enumerate() {
        if z.dim() != n {
            return Err(Error::Dimension {
                expected: n,
                actual: z.dim(),
            });
        }
        design[(i, 0)] = 1.0;
        for j in 0..n {
            design[(i, j + 1)] = z.coords()[j] - origin[j];
        }
    }
    let w = DVector::from_column_slice(weights);
    let y = DVector::from_column_slice(values);
    let mut weighted = design.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row *= w[i];
    }
    let mut normal = weighted.transpose() * &design;
    let rhs = weighted.transpose() * &y;

    let eig = SymmetricEigen::new(normal.clone());
    let max_ev = eig.eigenvalues.max();
    let min_ev = eig.eigenvalues.min();
    let ridged = !(min_ev > 0.0 && max_ev / min_ev <= RIDGE_CONDITION_LIMIT);
    if ridged {
        let lambda = RIDGE_SCALE * normal.trace() / n as f64;
        if lambda.is_nan() || lambda <= 0.0 {
            return Err(Error::DegenerateRegressor("all kernel weights vanish"));
        }
        for d in 0..p {
            normal[(d, d)] += lambda;
        }
    }
    let chol = normal
        .clone()
        .cholesky()
        .ok_or(Error::DegenerateRegressor("weighted normal matrix is not positive definite"))?;
    let theta = chol.solve(&rhs);
    let inverse = chol.inverse();

    let fitted = &design * &theta;
    let residuals = (0..values.len()).map(|i| values[i] - fitted[i]).collect();
    let beta: Vec<f64> = theta.iter().skip(1).copied().collect();
    let intercept = theta[0] - beta.iter().zip(origin).map(|(b, o)| b * o).sum::<f64>();
    Ok(AffineSolution {
        intercept,
        beta,
        residuals,
        inverse,
        ridged,
    })
}
