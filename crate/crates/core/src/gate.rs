//! Uncertainty-gated forecasting with a linear fallback.
//!
//! The primary model's forecast is accepted only when its pointwise
//! uncertainty is at or below a threshold; otherwise the forecast of a
//! simple affine fallback model is used. Thresholds may depend on the value
//! of the primary forecast through a piecewise-constant curve.

use serde::{Deserialize, Serialize};

use crate::analysis::{uncertainty_at, AnalysisConfig};
use crate::error::{Error, Result};
use crate::model::{EvalPoint, Model};
use crate::sampling::{standardize, StandardizationStats};
use crate::surrogate::solve_weighted_affine;
use crate::uncertainty::UncertaintyReport;

/// Uncertainty measure a policy thresholds on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMetric {
    LocalLinearRmse,
    ConformalSd,
}

impl GateMetric {
    pub fn read(self, report: &UncertaintyReport) -> f64 {
        match self {
            GateMetric::LocalLinearRmse => report.local_linear_rmse,
            GateMetric::ConformalSd => report.conformal_sd,
        }
    }
}

/// Threshold applied to forecasts in `[lower, upper)`. A missing bound is
/// unbounded on that side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdBand {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    pub threshold: f64,
}

impl ThresholdBand {
    fn lo(&self) -> f64 {
        self.lower.unwrap_or(f64::NEG_INFINITY)
    }

    fn hi(&self) -> f64 {
        self.upper.unwrap_or(f64::INFINITY)
    }

    pub fn contains(&self, forecast: f64) -> bool {
        self.lo() <= forecast && forecast < self.hi()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatePolicy {
    pub metric: GateMetric,
    #[serde(default)]
    pub threshold_curve: Vec<ThresholdBand>,
    pub default_threshold: f64,
}

fn valid_threshold(t: f64) -> bool {
    t.is_finite() && t > 0.0
}

impl GatePolicy {
    pub fn constant(metric: GateMetric, threshold: f64) -> Result<Self> {
        let p = GatePolicy {
            metric,
            threshold_curve: Vec::new(),
            default_threshold: threshold,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !valid_threshold(self.default_threshold) {
            return Err(Error::config(format!(
                "default_threshold must be finite and positive, got {}",
                self.default_threshold
            )));
        }
        for (i, band) in self.threshold_curve.iter().enumerate() {
            if !valid_threshold(band.threshold) {
                return Err(Error::config(format!(
                    "threshold_curve[{i}].threshold must be finite and positive, got {}",
                    band.threshold
                )));
            }
            if band.lo().is_nan() || band.hi().is_nan() || band.lo() >= band.hi() {
                return Err(Error::config(format!(
                    "threshold_curve[{i}] must satisfy lower < upper"
                )));
            }
            if i > 0 && self.threshold_curve[i - 1].hi() > band.lo() {
                return Err(Error::config(format!(
                    "threshold_curve[{i}] overlaps or precedes the previous band"
                )));
            }
        }
        Ok(())
    }

    /// Threshold for a primary forecast value.
    pub fn threshold_for(&self, forecast: f64) -> f64 {
        self.threshold_curve
            .iter()
            .find(|b| b.contains(forecast))
            .map_or(self.default_threshold, |b| b.threshold)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: GatePolicy = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }
}

/// Affine model on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub training_stats: StandardizationStats,
}

impl FallbackModel {
    pub fn dim(&self) -> usize {
        self.coefficients.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.coefficients.iter().any(|c| !c.is_finite()) || !self.intercept.is_finite() {
            return Err(Error::NonFinite("fallback coefficients"));
        }
        self.training_stats.validate()?;
        if self.training_stats.dim() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: self.training_stats.dim(),
            });
        }
        Ok(())
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let z = self.training_stats.apply(x);
        self.intercept + self.coefficients.iter().zip(&z).map(|(c, v)| c * v).sum::<f64>()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: FallbackModel = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }
}

/// Ordinary least squares of `targets` on standardized `features`.
pub fn fit_fallback(features: &[Vec<f64>], targets: &[f64]) -> Result<FallbackModel> {
    if features.len() != targets.len() {
        return Err(Error::Dimension {
            expected: features.len(),
            actual: targets.len(),
        });
    }
    let dim = features.first().map_or(0, Vec::len);
    if dim == 0 {
        return Err(Error::config("fallback training data has no feature columns"));
    }
    if features.len() < dim + 2 {
        return Err(Error::TooFewSamples {
            required: dim + 2,
            actual: features.len(),
        });
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("fallback targets"));
    }
    let (z, stats) = standardize(features)?;
    let rows = z
        .into_iter()
        .map(EvalPoint::new)
        .collect::<Result<Vec<_>>>()?;
    let ones = vec![1.0; targets.len()];
    let sol = solve_weighted_affine(&vec![0.0; dim], &rows, targets, &ones)?;
    Ok(FallbackModel {
        coefficients: sol.beta,
        intercept: sol.intercept,
        training_stats: stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastSource {
    Primary,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub forecast: f64,
    pub source: ForecastSource,
    pub uncertainty: f64,
    pub threshold_applied: f64,
    pub metric: GateMetric,
    pub primary_forecast: f64,
    pub fallback_forecast: f64,
    pub diagnostics: UncertaintyReport,
}

/// Forecast at `x`, routed through the fallback when the policy's metric
/// exceeds the threshold for the primary forecast's value.
///
/// Model failures are returned as errors, never answered by the fallback.
pub fn decide<M: Model + ?Sized>(
    model: &M,
    fallback: &FallbackModel,
    policy: &GatePolicy,
    x: &EvalPoint,
    cfg: &AnalysisConfig,
) -> Result<GateDecision> {
    policy.validate()?;
    if fallback.dim() != x.dim() || model.dimension() != x.dim() {
        return Err(Error::Dimension {
            expected: model.dimension(),
            actual: if fallback.dim() != x.dim() { fallback.dim() } else { x.dim() },
        });
    }
    let primary = model.eval(x)?;
    let (diagnostics, _, _) = uncertainty_at(model, x, cfg)?;
    let uncertainty = policy.metric.read(&diagnostics);
    let threshold = policy.threshold_for(primary);
    let fallback_forecast = fallback.predict(x.coords());
    let source = if uncertainty > threshold {
        ForecastSource::Fallback
    } else {
        ForecastSource::Primary
    };
    let decision = GateDecision {
        forecast: match source {
            ForecastSource::Primary => primary,
            ForecastSource::Fallback => fallback_forecast,
        },
        source,
        uncertainty,
        threshold_applied: threshold,
        metric: policy.metric,
        primary_forecast: primary,
        fallback_forecast,
        diagnostics,
    };
    assert_eq!(
        decision.source == ForecastSource::Fallback,
        decision.uncertainty > decision.threshold_applied
    );
    Ok(decision)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub index: usize,
    pub point: EvalPoint,
    pub forecast: f64,
    pub metric: f64,
    pub threshold: f64,
    pub exceeds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    pub metric: GateMetric,
    pub probes: Vec<ProbeResult>,
    /// Indices of probes whose metric exceeds their threshold.
    pub exceeding: Vec<usize>,
    /// Exceedances over successfully evaluated probes.
    pub exceedance_fraction: f64,
    pub failures: Vec<(usize, String)>,
}

/// Evaluates the policy metric at every probe point. Probe `i` uses the
/// configuration `cfg.for_point(i)`.
pub fn map_unforecastable_region<M: Model + ?Sized>(
    model: &M,
    policy: &GatePolicy,
    probe_points: &[EvalPoint],
    cfg: &AnalysisConfig,
) -> Result<RegionMap> {
    use rayon::prelude::*;

    policy.validate()?;
    if probe_points.is_empty() {
        return Err(Error::config("at least one probe point is required"));
    }
    let outcomes: Vec<Result<ProbeResult>> = probe_points
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let forecast = model.eval(x)?;
            let (report, _, _) = uncertainty_at(model, x, &cfg.for_point(i))?;
            let metric = policy.metric.read(&report);
            let threshold = policy.threshold_for(forecast);
            Ok(ProbeResult {
                index: i,
                point: x.clone(),
                forecast,
                metric,
                threshold,
                exceeds: metric > threshold,
            })
        })
        .collect();
    let mut probes = Vec::new();
    let mut failures = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(p) => probes.push(p),
            Err(e @ (Error::Config(_) | Error::Dimension { .. } | Error::TooFewSamples { .. })) => {
                return Err(e)
            }
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    let exceeding: Vec<usize> = probes.iter().filter(|p| p.exceeds).map(|p| p.index).collect();
    let exceedance_fraction = if probes.is_empty() {
        0.0
    } else {
        exceeding.len() as f64 / probes.len() as f64
    };
    Ok(RegionMap {
        metric: policy.metric,
        probes,
        exceeding,
        exceedance_fraction,
        failures,
    })
}

/// Axis-aligned lattice with `steps` points per axis on `[lower, upper]`.
pub fn axis_lattice(dim: usize, lower: f64, upper: f64, steps: usize) -> Vec<EvalPoint> {
    let steps = steps.max(1);
    let coord = |i: usize| {
        if steps == 1 {
            0.5 * (lower + upper)
        } else {
            lower + (upper - lower) * i as f64 / (steps - 1) as f64
        }
    };
    let total = steps.pow(dim as u32);
    (0..total)
        .map(|mut flat| {
            let mut coords = vec![0.0; dim];
            for c in coords.iter_mut().rev() {
                *c = coord(flat % steps);
                flat /= steps;
            }
            EvalPoint::from_vec_unchecked(coords)
        })
        .collect()
}
