//! Pointwise forecast-uncertainty and explanation-instability diagnostics for
//! black-box scalar models.
//!
//! A [`Model`] maps a point in `R^N` to a real number. Around any query point
//! the crate fits a kernel-weighted affine surrogate, summarizes the model's
//! output spread under Gaussian input perturbations, and measures how stable
//! gradient-style explanations are across replicate surrogates. A study
//! harness correlates those measures over many points, and a decision gate
//! routes high-uncertainty queries to a simple fallback model.
//!
//! ```
//! use fxstab::{analyze_point, AnalysisConfig, EvalPoint, ModelKind, ModelSpec};
//!
//! let model = ModelSpec::builtin_default(ModelKind::Radial, 0)?;
//! let x = EvalPoint::new(vec![0.2, -0.4, 0.1, 0.7])?;
//! let report = analyze_point(&model, &x, &AnalysisConfig::default())?;
//! assert!(report.uncertainty.local_linear_rmse >= 0.0);
//! # Ok::<(), fxstab::Error>(())
//! ```

pub mod analysis;
pub mod error;
pub mod format;
pub mod gate;
pub mod instability;
pub mod model;
pub mod sampling;
pub mod study;
pub mod surrogate;
pub mod uncertainty;

pub use analysis::{analyze_point, uncertainty_at, AnalysisConfig, PointAnalysis};
pub use error::{Error, Result};
pub use gate::{
    decide, fit_fallback, map_unforecastable_region, FallbackModel, ForecastSource, GateDecision,
    GateMetric, GatePolicy, RegionMap, ThresholdBand,
};
pub use instability::{
    build_replicate_ensemble, hessian_instability, jaccard_topk, lipschitz_finite_difference,
    FdMode, HessianInstability, InstabilityReport, ReplicateEnsemble,
};
pub use model::{eval_batch, AnyModel, EvalPoint, FnModel, Model, ModelKind, ModelSpec};
pub use sampling::{derive_seed, sample_perturbations, PerturbationConfig};
pub use study::{run_study, write_study_outputs, StudyConfig, StudyResult};
pub use surrogate::{fit_local_surrogate, LocalSurrogate};
pub use uncertainty::{conformal_stats, local_linear_uncertainty, ConformalStats, UncertaintyReport};

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
mod readme {}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    pub mod models {}
    #[doc = include_str!("../../../book/src/surrogates.md")]
    pub mod surrogates {}
    #[doc = include_str!("../../../book/src/uncertainty.md")]
    pub mod uncertainty {}
    #[doc = include_str!("../../../book/src/instability.md")]
    pub mod instability {}
    #[doc = include_str!("../../../book/src/studies.md")]
    pub mod studies {}
    #[doc = include_str!("../../../book/src/gating.md")]
    pub mod gating {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
