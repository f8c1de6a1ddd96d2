//! Per-point analysis: every uncertainty and instability measure at a query
//! point from one configuration and one seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instability::{
    build_replicate_ensemble, hessian_instability, jaccard_topk, lipschitz_from_values, FdMode,
    HessianInstability, InstabilityReport,
};
use crate::model::{EvalPoint, Model};
use crate::sampling::{self, derive_seed, stream, PerturbationConfig};
use crate::surrogate::{fit_local_surrogate, surrogate_gradient_norm, LocalSurrogate};
use crate::uncertainty::{conformal_stats, ConformalStats, UncertaintyReport};

/// Sampling parameters shared by all per-point measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Perturbation scale for surrogate samples, conformal perturbations and
    /// replicate centers.
    pub sigma_pert: f64,
    pub kernel_sigma: f64,
    /// Samples per surrogate fit (`k`).
    pub samples: usize,
    /// Replicate surrogates per point (`M`).
    pub replicates: usize,
    /// Perturbations behind the conformal statistics and finite differences.
    pub conformal_samples: usize,
    /// Features per top-k set; `None` means `max(1, N / 2)`.
    pub topk: Option<usize>,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            sigma_pert: sampling::DEFAULT_SIGMA_PERT,
            kernel_sigma: sampling::DEFAULT_KERNEL_SIGMA,
            samples: sampling::DEFAULT_SURROGATE_SAMPLES,
            replicates: sampling::DEFAULT_REPLICATES,
            conformal_samples: sampling::DEFAULT_REPLICATES,
            topk: None,
            seed: 0,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        self.surrogate_config().validate_for_fit(dim)?;
        self.conformal_config().validate()?;
        if self.replicates < 2 {
            return Err(Error::config(format!(
                "at least 2 replicates are needed, got {}",
                self.replicates
            )));
        }
        let k = self.topk_for(dim);
        if k == 0 || k > dim {
            return Err(Error::config(format!("top-k must lie in 1..={dim}, got {k}")));
        }
        Ok(())
    }

    pub fn topk_for(&self, dim: usize) -> usize {
        self.topk.unwrap_or((dim / 2).max(1))
    }

    /// Configuration for the `index`-th point of a sweep.
    pub fn for_point(&self, index: usize) -> AnalysisConfig {
        AnalysisConfig {
            seed: derive_seed(self.seed, &[stream::EVAL_POINTS, index as u64]),
            ..self.clone()
        }
    }

    pub fn surrogate_config(&self) -> PerturbationConfig {
        PerturbationConfig::new(
            self.sigma_pert,
            self.samples,
            self.kernel_sigma,
            derive_seed(self.seed, &[stream::SURROGATE]),
        )
    }

    pub fn conformal_config(&self) -> PerturbationConfig {
        PerturbationConfig::new(
            self.sigma_pert,
            self.conformal_samples,
            self.kernel_sigma,
            derive_seed(self.seed, &[stream::CONFORMAL]),
        )
    }

    pub fn ensemble_config(&self) -> PerturbationConfig {
        PerturbationConfig::new(
            self.sigma_pert,
            self.samples,
            self.kernel_sigma,
            derive_seed(self.seed, &[stream::REPLICATE_CENTERS]),
        )
    }
}

/// Everything computed at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointAnalysis {
    pub point: EvalPoint,
    pub forecast: f64,
    pub uncertainty: UncertaintyReport,
    pub instability: InstabilityReport,
    pub surrogate: LocalSurrogate,
    pub hessian: HessianInstability,
}

/// Surrogate and conformal statistics only (no replicate ensemble).
pub fn uncertainty_at<M: Model + ?Sized>(
    model: &M,
    x: &EvalPoint,
    cfg: &AnalysisConfig,
) -> Result<(UncertaintyReport, LocalSurrogate, ConformalStats)> {
    let surrogate = fit_local_surrogate(model, x, &cfg.surrogate_config())?;
    let conformal = conformal_stats(model, x, &cfg.conformal_config())?;
    Ok((UncertaintyReport::from_parts(&surrogate, &conformal), surrogate, conformal))
}

/// Computes every uncertainty and instability measure at `x`.
pub fn analyze_point<M: Model + ?Sized>(
    model: &M,
    x: &EvalPoint,
    cfg: &AnalysisConfig,
) -> Result<PointAnalysis> {
    if model.dimension() != x.dim() {
        return Err(Error::Dimension {
            expected: model.dimension(),
            actual: x.dim(),
        });
    }
    cfg.validate(x.dim())?;
    let forecast = model.eval(x)?;
    let (uncertainty, surrogate, conformal) = uncertainty_at(model, x, cfg)?;
    let ensemble = build_replicate_ensemble(model, x, &cfg.ensemble_config(), cfg.replicates)?;
    let hessian = hessian_instability(&ensemble)?;
    let topk = cfg.topk_for(x.dim());
    let instability = InstabilityReport {
        center: x.clone(),
        lipschitz_surrogate: surrogate_gradient_norm(&surrogate),
        lipschitz_fd_mean: lipschitz_from_values(&conformal.samples, &conformal.values, FdMode::Mean)?,
        lipschitz_fd_max: lipschitz_from_values(&conformal.samples, &conformal.values, FdMode::Max)?,
        jaccard_avg: jaccard_topk(&ensemble, topk)?,
        hessian_mag: hessian.magnitude,
        hessian_mag_stability: hessian.magnitude_stability,
        hessian_cpl: hessian.coupling,
        hessian_cpl_stability: hessian.coupling_stability,
        hessian_overall: hessian.overall,
        hessian_degenerate: hessian.degenerate,
        topk,
        replicates: cfg.replicates,
    };
    Ok(PointAnalysis {
        point: x.clone(),
        forecast,
        uncertainty,
        instability,
        surrogate,
        hessian,
    })
}
