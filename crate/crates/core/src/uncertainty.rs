//! Forecast-uncertainty measures at a point.
//!
//! Two views are provided. The local-linear uncertainty is the kernel
//! weighted RMSE of a fitted surrogate: it measures how badly an affine story
//! describes the model near the point. The conformal statistics summarize the
//! spread of model outputs under Gaussian input perturbations: standard
//! deviation, interquartile range, range and the 5%/95% quantiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EvalPoint, Model};
use crate::sampling::{sample_perturbations, PerturbationConfig};
use crate::surrogate::LocalSurrogate;

/// Smallest perturbation count for which quantile summaries are reported as
/// reliable.
pub const MIN_RELIABLE_QUANTILE_SAMPLES: usize = 20;

/// `sqrt(sum w_i r_i^2 / sum w_i)` over the surrogate's samples.
pub fn local_linear_uncertainty(s: &LocalSurrogate) -> f64 {
    let sum_w: f64 = s.weights.iter().sum();
    if sum_w <= 0.0 {
        return 0.0;
    }
    (s.objective() / sum_w).sqrt()
}

/// Empirical quantile of sorted data, interpolating linearly between order
/// statistics: with `h = (M - 1) p`, `Q_p = y[floor h] + frac(h) (y[floor h + 1] - y[floor h])`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let gamma = h - lo as f64;
    match sorted.get(lo + 1) {
        Some(next) if gamma > 0.0 => sorted[lo] + gamma * (next - sorted[lo]),
        _ => sorted[lo],
    }
}

/// Sample standard deviation with the `1 / (M - 1)` normalization.
pub fn sample_sd(values: &[f64]) -> f64 {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)).sqrt()
}

/// Dispersion of model outputs over a set of perturbations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalStats {
    pub mean: f64,
    pub sd: f64,
    pub iqr: f64,
    pub range: f64,
    pub q05: f64,
    pub q95: f64,
    pub sample_count: usize,
    /// False when fewer than 20 perturbations back the quantiles.
    pub quantiles_reliable: bool,
    pub seed: u64,
    #[serde(skip)]
    pub samples: Vec<EvalPoint>,
    #[serde(skip)]
    pub values: Vec<f64>,
}

/// Summarizes already-evaluated perturbation outputs.
pub fn conformal_from_values(values: &[f64]) -> Result<ConformalStats> {
    if values.len() < 2 {
        return Err(Error::TooFewSamples {
            required: 2,
            actual: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model outputs"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p| quantile_sorted(&sorted, p);
    Ok(ConformalStats {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        sd: sample_sd(values),
        iqr: q(0.75) - q(0.25),
        range: sorted[sorted.len() - 1] - sorted[0],
        q05: q(0.05),
        q95: q(0.95),
        sample_count: values.len(),
        quantiles_reliable: values.len() >= MIN_RELIABLE_QUANTILE_SAMPLES,
        seed: 0,
        samples: Vec::new(),
        values: values.to_vec(),
    })
}

/// Evaluates the model at `cfg.count` Gaussian perturbations of `center` and
/// summarizes the outputs.
pub fn conformal_stats<M: Model + ?Sized>(
    model: &M,
    center: &EvalPoint,
    cfg: &PerturbationConfig,
) -> Result<ConformalStats> {
    cfg.validate()?;
    if model.dimension() != center.dim() {
        return Err(Error::Dimension {
            expected: model.dimension(),
            actual: center.dim(),
        });
    }
    let samples = sample_perturbations(center, cfg);
    let values = model.eval_batch(&samples)?;
    let mut stats = conformal_from_values(&values)?;
    stats.seed = cfg.seed;
    stats.samples = samples;
    Ok(stats)
}

/// Both uncertainty views at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub center: EvalPoint,
    pub local_linear_rmse: f64,
    pub conformal_sd: f64,
    pub conformal_iqr: f64,
    pub conformal_range: f64,
    pub conformal_q05: f64,
    pub conformal_q95: f64,
    /// Perturbations behind the conformal fields.
    pub sample_count: usize,
    pub quantiles_reliable: bool,
    /// Seed of the surrogate samples behind `local_linear_rmse`.
    pub surrogate_seed: u64,
    /// Seed of the perturbations behind the conformal fields.
    pub conformal_seed: u64,
}

impl UncertaintyReport {
    pub fn from_parts(surrogate: &LocalSurrogate, conformal: &ConformalStats) -> Self {
        UncertaintyReport {
            center: surrogate.center.clone(),
            local_linear_rmse: local_linear_uncertainty(surrogate),
            conformal_sd: conformal.sd,
            conformal_iqr: conformal.iqr,
            conformal_range: conformal.range,
            conformal_q05: conformal.q05,
            conformal_q95: conformal.q95,
            sample_count: conformal.sample_count,
            quantiles_reliable: conformal.quantiles_reliable,
            surrogate_seed: surrogate.seed,
            conformal_seed: conformal.seed,
        }
    }

    pub fn interval_90(&self) -> (f64, f64) {
        (self.conformal_q05, self.conformal_q95)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FnModel;
    use crate::surrogate::{fit_local_surrogate, fit_weighted_surrogate};

    fn pt(v: &[f64]) -> EvalPoint {
        EvalPoint::new(v.to_vec()).unwrap()
    }

    #[test]
    fn five_point_order_statistics() {
        let s = conformal_from_values(&[3.0, 1.0, 5.0, 2.0, 4.0]).unwrap();
        assert_eq!(s.range, 4.0);
        assert_eq!(s.iqr, 2.0);
        assert!((s.q05 - 1.2).abs() < 1e-15);
        assert!((s.q95 - 4.8).abs() < 1e-15);
        assert!((s.sd - 2.5f64.sqrt()).abs() < 1e-15);
        assert!(!s.quantiles_reliable);
    }

    #[test]
    fn quantile_interpolation_rule() {
        let y = [10.0, 20.0, 30.0, 40.0];
        // h = 3 p
        assert_eq!(quantile_sorted(&y, 0.0), 10.0);
        assert_eq!(quantile_sorted(&y, 1.0), 40.0);
        assert!((quantile_sorted(&y, 0.5) - 25.0).abs() < 1e-12);
        assert!((quantile_sorted(&y, 0.1) - 13.0).abs() < 1e-12);
    }

    #[test]
    fn constant_model_has_no_spread() {
        let m = FnModel::new(2, |_: &[f64]| 4.5);
        let cfg = PerturbationConfig::new(0.3, 25, 0.75, 3);
        let s = conformal_stats(&m, &pt(&[0.0, 1.0]), &cfg).unwrap();
        assert_eq!((s.sd, s.iqr, s.range), (0.0, 0.0, 0.0));
        assert_eq!((s.q05, s.q95), (4.5, 4.5));
        assert!(s.quantiles_reliable);
    }

    #[test]
    fn too_few_perturbations() {
        assert!(conformal_from_values(&[1.0]).is_err());
        let m = FnModel::new(1, |x: &[f64]| x[0]);
        let cfg = PerturbationConfig::new(0.3, 1, 0.75, 0);
        assert!(conformal_stats(&m, &pt(&[0.0]), &cfg).is_err());
    }

    #[test]
    fn linear_sd_is_sigma_times_gradient_norm() {
        let m = FnModel::new(2, |x: &[f64]| 3.0 * x[0] + 4.0 * x[1]);
        let cfg = PerturbationConfig::new(0.1, 10_000, 0.75, 5);
        let s = conformal_stats(&m, &pt(&[0.3, 0.3]), &cfg).unwrap();
        assert!((0.49..=0.51).contains(&s.sd), "{}", s.sd);
    }

    #[test]
    fn weighted_rmse_formula() {
        let lin = FnModel::new(2, |x: &[f64]| x[0] - 2.0 * x[1]);
        let s = fit_local_surrogate(&lin, &pt(&[1.0, 1.0]), &PerturbationConfig::default()).unwrap();
        assert!(local_linear_uncertainty(&s) <= 1e-8);

        let mut s2 = s.clone();
        s2.weights = vec![1.0; s2.residuals.len()];
        s2.residuals = vec![-0.7; s2.residuals.len()];
        assert!((local_linear_uncertainty(&s2) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn rmse_recomputed_from_stored_samples() {
        let m = FnModel::new(1, |x: &[f64]| x[0] * x[0]);
        let cfg = PerturbationConfig::new(1.0, 5000, 0.75, 17);
        let s = fit_local_surrogate(&m, &pt(&[0.0]), &cfg).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (z, w) in s.samples.iter().zip(&s.weights) {
            let r = z.coords()[0].powi(2) - s.intercept - s.beta[0] * z.coords()[0];
            num += w * r * r;
            den += w;
        }
        assert!((local_linear_uncertainty(&s) - (num / den).sqrt()).abs() < 1e-12);
        assert!(local_linear_uncertainty(&s) > 0.1);
    }

    #[test]
    fn output_scaling_and_shift() {
        let f = |x: &[f64]| (2.0 * x[0]).sin() + x[1] * x[1];
        let base = FnModel::new(2, f);
        let scaled = FnModel::new(2, move |x: &[f64]| 10.0 * f(x));
        let shifted = FnModel::new(2, move |x: &[f64]| f(x) + 3.0);
        let c = pt(&[0.4, -0.2]);
        let cfg = PerturbationConfig::new(0.3, 50, 0.75, 1);
        let a = conformal_stats(&base, &c, &cfg).unwrap();
        let b = conformal_stats(&scaled, &c, &cfg).unwrap();
        let d = conformal_stats(&shifted, &c, &cfg).unwrap();
        for (x, y) in [(a.sd, b.sd), (a.iqr, b.iqr), (a.range, b.range)] {
            assert!((10.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
        for (x, y) in [(a.sd, d.sd), (a.iqr, d.iqr), (a.range, d.range)] {
            assert!((x - y).abs() <= 1e-12);
        }
        assert!((a.q05 + 3.0 - d.q05).abs() < 1e-12);
        assert!((a.q95 + 3.0 - d.q95).abs() < 1e-12);

        let sa = fit_local_surrogate(&base, &c, &cfg).unwrap();
        let sb = fit_weighted_surrogate(
            &c,
            sa.samples.clone(),
            sa.values.iter().map(|v| 10.0 * v).collect(),
            sa.weights.clone(),
        )
        .unwrap();
        let (ra, rb) = (local_linear_uncertainty(&sa), local_linear_uncertainty(&sb));
        assert!((10.0 * ra - rb).abs() <= 1e-10 * rb);
    }
}
