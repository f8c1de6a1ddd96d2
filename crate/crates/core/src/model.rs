//! Black-box scalar models.
//!
//! Everything downstream talks to a model through the [`Model`] trait, which
//! only promises batch evaluation of points in a fixed dimension. The
//! built-in synthetic test functions live here together with their analytic
//! gradients, as does [`ExternalModel`], which forwards rows to a child
//! process over a line-oriented CSV protocol.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::format::csv_row;
use crate::sampling::{derive_seed, rng_from_seed, stream};

/// A point in feature space (standardized units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EvalPoint {
    coords: Vec<f64>,
}

impl EvalPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::config("evaluation point must have at least one coordinate"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("evaluation point"));
        }
        Ok(EvalPoint { coords })
    }

    /// Skips validation; callers guarantee finiteness and `N >= 1`.
    pub(crate) fn from_vec_unchecked(coords: Vec<f64>) -> Self {
        EvalPoint { coords }
    }

    pub fn zeros(dim: usize) -> Self {
        EvalPoint {
            coords: vec![0.0; dim.max(1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn norm(&self) -> f64 {
        self.coords.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for EvalPoint {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        EvalPoint::new(v)
    }
}

impl From<EvalPoint> for Vec<f64> {
    fn from(p: EvalPoint) -> Self {
        p.coords
    }
}

/// A scalar black-box model of fixed input dimension.
pub trait Model: Send + Sync {
    fn dimension(&self) -> usize;

    /// Evaluates every point, preserving order.
    fn eval_batch(&self, points: &[EvalPoint]) -> Result<Vec<f64>>;

    fn eval(&self, x: &EvalPoint) -> Result<f64> {
        Ok(self.eval_batch(std::slice::from_ref(x))?[0])
    }
}

impl<M: Model + ?Sized> Model for &M {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn eval_batch(&self, points: &[EvalPoint]) -> Result<Vec<f64>> {
        (**self).eval_batch(points)
    }
}

impl<M: Model + ?Sized> Model for Box<M> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn eval_batch(&self, points: &[EvalPoint]) -> Result<Vec<f64>> {
        (**self).eval_batch(points)
    }
}

/// Evaluates `points` on `model`; element `i` is the value at `points[i]`.
pub fn eval_batch<M: Model + ?Sized>(model: &M, points: &[EvalPoint]) -> Result<Vec<f64>> {
    model.eval_batch(points)
}

pub(crate) fn check_dims(expected: usize, points: &[EvalPoint]) -> Result<()> {
    match points.iter().find(|p| p.dim() != expected) {
        Some(p) => Err(Error::Dimension {
            expected,
            actual: p.dim(),
        }),
        None => Ok(()),
    }
}

pub(crate) fn check_outputs(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(row) => Err(Error::ModelEval {
            row,
            reason: format!("non-finite output {}", values[row]),
        }),
        None => Ok(()),
    }
}

/// A closure wrapped as a [`Model`].
pub struct FnModel<F> {
    dim: usize,
    f: F,
}

impl<F> FnModel<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnModel { dim, f }
    }
}

impl<F> Model for FnModel<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn dimension(&self) -> usize {
        self.dim
    }

    fn eval_batch(&self, points: &[EvalPoint]) -> Result<Vec<f64>> {
        check_dims(self.dim, points)?;
        let values: Vec<f64> = points.iter().map(|p| (self.f)(p.coords())).collect();
        check_outputs(&values)?;
        Ok(values)
    }
}

// ---------------------------------------------------------------------------
// Built-in test functions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Wavelike,
    Radial,
    SigmoidNetwork,
    PiecewiseLinear,
    Linear,
    External,
}

impl ModelKind {
    pub const BUILTIN: [ModelKind; 5] = [
        ModelKind::Wavelike,
        ModelKind::Radial,
        ModelKind::SigmoidNetwork,
        ModelKind::PiecewiseLinear,
        ModelKind::Linear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Wavelike => "wavelike",
            ModelKind::Radial => "radial",
            ModelKind::SigmoidNetwork => "sigmoid_network",
            ModelKind::PiecewiseLinear => "piecewise_linear",
            ModelKind::Linear => "linear",
            ModelKind::External => "external",
        }
    }

    /// Parses a kind name; `sigmoid` and `piecewise` are accepted as aliases.
    pub fn parse(name: &str) -> Option<ModelKind> {
        Some(match name {
            "wavelike" => ModelKind::Wavelike,
            "radial" => ModelKind::Radial,
            "sigmoid_network" | "sigmoid" => ModelKind::SigmoidNetwork,
            "piecewise_linear" | "piecewise" => ModelKind::PiecewiseLinear,
            "linear" => ModelKind::Linear,
            "external" => ModelKind::External,
            _ => return None,
        })
    }

    /// Input dimension used when none is given.
    pub fn default_dimension(self) -> usize {
        match self {
            ModelKind::PiecewiseLinear => 3,
            _ => 4,
        }
    }

    fn min_dimension(self) -> usize {
        match self {
            ModelKind::Wavelike => 4,
            _ => 1,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavelikeParams {
    pub weights: [f64; 4],
}

impl Default for WavelikeParams {
    fn default() -> Self {
        WavelikeParams { weights: [1.0; 4] }
    }
}

/// `sum_j w_j (a_j sigmoid(b_j x_j) + c_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmoidParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub w: Vec<f64>,
}

/// Slope `a_j` below zero, `b_j` at or above zero, output weights `w_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireProtocol {
    LineCsv,
}

/// How to launch and talk to an out-of-process model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalModelConfig {
    /// Executable followed by its arguments.
    pub command: Vec<String>,
    #[serde(default = "default_protocol")]
    pub protocol: WireProtocol,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_protocol() -> WireProtocol {
    WireProtocol::LineCsv
}

fn default_timeout_ms() -> u64 {
    10_000
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Wavelike(WavelikeParams),
    Radial,
    SigmoidNetwork(SigmoidParams),
    PiecewiseLinear(PiecewiseParams),
    Linear(LinearParams),
    External(ExternalModelConfig),
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Wavelike(_) => ModelKind::Wavelike,
            ModelParams::Radial => ModelKind::Radial,
            ModelParams::SigmoidNetwork(_) => ModelKind::SigmoidNetwork,
            ModelParams::PiecewiseLinear(_) => ModelKind::PiecewiseLinear,
            ModelParams::Linear(_) => ModelKind::Linear,
            ModelParams::External(_) => ModelKind::External,
        }
    }
}

/// Draws from uniform [-2, 2] rejecting |v| < 0.1.
fn nondegenerate_uniform<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let v: f64 = rng.random_range(-2.0..=2.0);
        if v.abs() >= 0.1 {
            return v;
        }
    }
}

fn sample_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| nondegenerate_uniform(rng)).collect()
}

/// A fully resolved model description: kind, dimension, seed and explicit
/// parameters. Round-trips through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelSpecDoc", into = "ModelSpecDoc")]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dimension: usize,
    pub seed: u64,
    pub params: ModelParams,
}

impl ModelSpec {
    /// Built-in model with parameters drawn from `seed`.
    ///
    /// Sigmoid-network and piecewise parameters, and linear coefficients, are
    /// uniform on `[-2, 2]` with `|v| < 0.1` rejected. The wave-like weights
    /// are fixed at one and the radial function has no parameters, so the
    /// seed does not affect those two.
    pub fn builtin(kind: ModelKind, dimension: usize, seed: u64) -> Result<Self> {
        if kind == ModelKind::External {
            return Err(Error::spec("kind", "external models need an explicit command"));
        }
        let mut rng = rng_from_seed(derive_seed(seed, &[stream::MODEL_PARAMS]));
        let n = dimension;
        let params = match kind {
            ModelKind::Wavelike => ModelParams::Wavelike(WavelikeParams::default()),
            ModelKind::Radial => ModelParams::Radial,
            ModelKind::SigmoidNetwork => {
                // drawn per dimension as (a, b, c, w) so a prefix of
                // dimensions does not depend on N
                let mut p = SigmoidParams {
                    a: Vec::with_capacity(n),
                    b: Vec::with_capacity(n),
                    c: Vec::with_capacity(n),
                    w: Vec::with_capacity(n),
                };
                for _ in 0..n {
                    p.a.push(nondegenerate_uniform(&mut rng));
                    p.b.push(nondegenerate_uniform(&mut rng));
                    p.c.push(nondegenerate_uniform(&mut rng));
                    p.w.push(nondegenerate_uniform(&mut rng));
                }
                ModelParams::SigmoidNetwork(p)
            }
            ModelKind::PiecewiseLinear => {
                let mut p = PiecewiseParams {
                    a: Vec::with_capacity(n),
                    b: Vec::with_capacity(n),
                    w: Vec::with_capacity(n),
                };
                for _ in 0..n {
                    p.a.push(nondegenerate_uniform(&mut rng));
                    p.b.push(nondegenerate_uniform(&mut rng));
                    p.w.push(nondegenerate_uniform(&mut rng));
                }
                ModelParams::PiecewiseLinear(p)
            }
            ModelKind::Linear => ModelParams::Linear(LinearParams {
                coefficients: sample_vec(&mut rng, n),
                intercept: nondegenerate_uniform(&mut rng),
            }),
            ModelKind::External => unreachable!(),
        };
        let spec = ModelSpec {
            kind,
            dimension,
            seed,
            params,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Built-in model at its default dimension.
    pub fn builtin_default(kind: ModelKind, seed: u64) -> Result<Self> {
        ModelSpec::builtin(kind, kind.default_dimension(), seed)
    }

    pub fn linear(coefficients: Vec<f64>, intercept: f64) -> Result<Self> {
        let spec = ModelSpec {
            kind: ModelKind::Linear,
            dimension: coefficients.len(),
            seed: 0,
            params: ModelParams::Linear(LinearParams {
                coefficients,
                intercept,
            }),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn external(dimension: usize, config: ExternalModelConfig) -> Result<Self> {
        let spec = ModelSpec {
            kind: ModelKind::External,
            dimension,
            seed: 0,
            params: ModelParams::External(config),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.kind() != self.kind {
            return Err(Error::spec(
                "params",
                format!("parameters do not match kind `{}`", self.kind),
            ));
        }
        if self.dimension < self.kind.min_dimension() {
            return Err(Error::spec(
                "dimension",
                format!(
                    "{} requires at least {} input features, got {}",
                    self.kind,
                    self.kind.min_dimension(),
                    self.dimension
                ),
            ));
        }
        let n = self.dimension;
        let check = |field: &str, v: &[f64]| -> Result<()> {
            if v.len() != n {
                return Err(Error::spec(
                    format!("params.{field}"),
                    format!("expected {n} values, got {}", v.len()),
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::spec(format!("params.{field}"), "values must be finite"));
            }
            Ok(())
        };
        match &self.params {
            ModelParams::Wavelike(p) => {
                if p.weights.iter().any(|x| !x.is_finite()) {
                    return Err(Error::spec("params.weights", "values must be finite"));
                }
            }
            ModelParams::Radial => {}
            ModelParams::SigmoidNetwork(p) => {
                check("a", &p.a)?;
                check("b", &p.b)?;
                check("c", &p.c)?;
                check("w", &p.w)?;
            }
            ModelParams::PiecewiseLinear(p) => {
                check("a", &p.a)?;
                check("b", &p.b)?;
                check("w", &p.w)?;
            }
            ModelParams::Linear(p) => {
                check("coefficients", &p.coefficients)?;
                if !p.intercept.is_finite() {
                    return Err(Error::spec("params.intercept", "value must be finite"));
                }
            }
            ModelParams::External(c) => {
                if c.command.is_empty() || c.command[0].is_empty() {
                    return Err(Error::spec("params.command", "command must not be empty"));
                }
                if c.timeout_ms == 0 {
                    return Err(Error::spec("params.timeout_ms", "timeout must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelSpecDoc = serde_json::from_str(text)
            .map_err(|e| Error::spec(doc_field_hint(&e.to_string()), e.to_string()))?;
        ModelSpec::try_from(doc)
    }

    pub fn to_json(&self) -> Result<String> {
        crate::format::to_json(self, Some(2))
    }

    /// Value at a single point for built-in kinds.
    pub fn eval_point(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dimension {
            return Err(Error::Dimension {
                expected: self.dimension,
                actual: x.len(),
            });
        }
        Ok(match &self.params {
            ModelParams::Wavelike(p) => eval_wavelike(x, p)?,
            ModelParams::Radial => eval_radial(x),
            ModelParams::SigmoidNetwork(p) => eval_sigmoid_network(x, p),
            ModelParams::PiecewiseLinear(p) => eval_piecewise_linear(x, p),
            ModelParams::Linear(p) => {
                p.intercept + p.coefficients.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
            }
            ModelParams::External(_) => {
                return Err(Error::config(
                    "external models are evaluated through ExternalModel",
                ))
            }
        })
    }

    /// Analytic gradient for built-in kinds; `None` for external models.
    ///
    /// On the piecewise model's kinks the right-hand slope is returned.
    pub fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        if x.len() != self.dimension {
            return None;
        }
        match &self.params {
            ModelParams::Wavelike(p) => Some(grad_wavelike(x, p)),
            ModelParams::Radial => Some(grad_radial(x)),
            ModelParams::SigmoidNetwork(p) => Some(grad_sigmoid_network(x, p)),
            ModelParams::PiecewiseLinear(p) => Some(
                x.iter()
                    .enumerate()
                    .map(|(j, &v)| p.w[j] * if v < 0.0 { p.a[j] } else { p.b[j] })
                    .collect(),
            ),
            ModelParams::Linear(p) => Some(p.coefficients.clone()),
            ModelParams::External(_) => None,
        }
    }

    /// Instantiates the spec as an evaluable model (spawning nothing yet for
    /// external kinds; the child starts on first use).
    pub fn instantiate(&self) -> Result<AnyModel> {
        self.validate()?;
        Ok(match &self.params {
            ModelParams::External(cfg) => {
                AnyModel::External(ExternalModel::new(self.dimension, cfg.clone()))
            }
            _ => AnyModel::Builtin(self.clone()),
        })
    }
}

fn doc_field_hint(msg: &str) -> String {
    // serde messages look like "missing field `kind` at line 1 column 2"
    msg.split('`').nth(1).unwrap_or("document").to_string()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSpecDoc {
    kind: String,
    #[serde(default)]
    dimension: Option<usize>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    params: Option<Value>,
}

impl TryFrom<ModelSpecDoc> for ModelSpec {
    type Error = Error;

    fn try_from(doc: ModelSpecDoc) -> Result<Self> {
        let kind = ModelKind::parse(&doc.kind)
            .ok_or_else(|| Error::spec("kind", format!("unknown model kind `{}`", doc.kind)))?;
        let seed = doc.seed.unwrap_or(0);
        let params = match doc.params {
            None | Some(Value::Null) => {
                let dimension = doc.dimension.unwrap_or_else(|| kind.default_dimension());
                return ModelSpec::builtin(kind, dimension, seed);
            }
            Some(v) => v,
        };
        fn parse<T: serde::de::DeserializeOwned>(v: Value) -> Result<T> {
            serde_path_to_error::deserialize(v).map_err(|e| {
                let path = e.path().to_string();
                let reason = e.into_inner().to_string();
                let field = if path == "." {
                    format!("params.{}", doc_field_hint(&reason))
                } else {
                    format!("params.{path}")
                };
                Error::spec(field, reason)
            })
        }
        let params = match kind {
            ModelKind::Wavelike => ModelParams::Wavelike(parse(params)?),
            ModelKind::Radial => ModelParams::Radial,
            ModelKind::SigmoidNetwork => ModelParams::SigmoidNetwork(parse(params)?),
            ModelKind::PiecewiseLinear => ModelParams::PiecewiseLinear(parse(params)?),
            ModelKind::Linear => ModelParams::Linear(parse(params)?),
            ModelKind::External => ModelParams::External(parse(params)?),
        };
        let dimension = match (doc.dimension, &params) {
            (Some(d), _) => d,
            (None, ModelParams::SigmoidNetwork(p)) => p.a.len(),
            (None, ModelParams::PiecewiseLinear(p)) => p.a.len(),
            (None, ModelParams::Linear(p)) => p.coefficients.len(),
            (None, ModelParams::External(_)) => {
                return Err(Error::spec("dimension", "external models must state their dimension"))
            }
            (None, _) => kind.default_dimension(),
        };
        let spec = ModelSpec {
            kind,
            dimension,
            seed,
            params,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<ModelSpec> for ModelSpecDoc {
    fn from(spec: ModelSpec) -> Self {
        let params = match &spec.params {
            ModelParams::Wavelike(p) => json!(p),
            ModelParams::Radial => json!({}),
            ModelParams::SigmoidNetwork(p) => json!(p),
            ModelParams::PiecewiseLinear(p) => json!(p),
            ModelParams::Linear(p) => json!(p),
            ModelParams::External(p) => json!(p),
        };
        ModelSpecDoc {
            kind: spec.kind.name().to_string(),
            dimension: Some(spec.dimension),
            seed: Some(spec.seed),
            params: Some(params),
        }
    }
}

/// `w1 tanh(5 x1) + w2 exp(-x2^2) sin(10 x2) + w3 sin(3 x3) cos(2 x3) + w4 x4 exp(-x4^2 / 2)`.
///
/// Coordinates beyond the fourth do not enter the function.
pub fn eval_wavelike(x: &[f64], params: &WavelikeParams) -> Result<f64> {
    if x.len() < 4 {
        return Err(Error::DimensionTooSmall {
            model: "wavelike",
            required: 4,
            actual: x.len(),
        });
    }
    let w = &params.weights;
    Ok(w[0] * (5.0 * x[0]).tanh()
        + w[1] * (-x[1] * x[1]).exp() * (10.0 * x[1]).sin()
        + w[2] * (3.0 * x[2]).sin() * (2.0 * x[2]).cos()
        + w[3] * x[3] * (-0.5 * x[3] * x[3]).exp())
}

fn grad_wavelike(x: &[f64], params: &WavelikeParams) -> Vec<f64> {
    let w = &params.weights;
    let mut g = vec![0.0; x.len()];
    let sech = 1.0 / (5.0 * x[0]).cosh();
    g[0] = w[0] * 5.0 * sech * sech;
    let e2 = (-x[1] * x[1]).exp();
    g[1] = w[1] * e2 * (10.0 * (10.0 * x[1]).cos() - 2.0 * x[1] * (10.0 * x[1]).sin());
    g[2] = w[2]
        * (3.0 * (3.0 * x[2]).cos() * (2.0 * x[2]).cos()
            - 2.0 * (3.0 * x[2]).sin() * (2.0 * x[2]).sin());
    g[3] = w[3] * (-0.5 * x[3] * x[3]).exp() * (1.0 - x[3] * x[3]);
    g
}

/// `sin(5 r) / (1 + r^2 / 2)` with `r` the Euclidean norm.
pub fn eval_radial(x: &[f64]) -> f64 {
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    (5.0 * r).sin() / (1.0 + 0.5 * r * r)
}

fn grad_radial(x: &[f64]) -> Vec<f64> {
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let den = 1.0 + 0.5 * r * r;
    // behaves like 5r at the origin, where no gradient exists
    if r == 0.0 {
        return vec![0.0; x.len()];
    }
    let dr = (5.0 * (5.0 * r).cos() * den - (5.0 * r).sin() * r) / (den * den);
    x.iter().map(|v| dr * v / r).collect()
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// `sum_j w_j (a_j sigmoid(b_j x_j) + c_j)`.
pub fn eval_sigmoid_network(x: &[f64], p: &SigmoidParams) -> f64 {
    x.iter()
        .enumerate()
        .map(|(j, &v)| p.w[j] * (p.a[j] * sigmoid(p.b[j] * v) + p.c[j]))
        .sum()
}

fn grad_sigmoid_network(x: &[f64], p: &SigmoidParams) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(j, &v)| {
            let s = sigmoid(p.b[j] * v);
            p.w[j] * p.a[j] * p.b[j] * s * (1.0 - s)
        })
        .collect()
}

/// `sum_j w_j z_j` with `z_j = a_j x_j` for `x_j < 0`, else `b_j x_j`.
pub fn eval_piecewise_linear(x: &[f64], p: &PiecewiseParams) -> f64 {
    x.iter()
        .enumerate()
        .map(|(j, &v)| p.w[j] * if v < 0.0 { p.a[j] * v } else { p.b[j] * v })
        .sum()
}

impl Model for ModelSpec {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn eval_batch(&self, points: &[EvalPoint]) -> Result<Vec<f64>> {
        check_dims(self.dimension, points)?;
        let values = points
            .iter()
            .map(|p| self.eval_point(p.coords()))
            .collect::<Result<Vec<_>>>()?;
        check_outputs(&values)?;
        Ok(values)
    }
}

/// A model built from a [`ModelSpec`]: either a built-in function or a
/// child process.
pub enum AnyModel {
    Builtin(ModelSpec),
    External(ExternalModel),
}

impl Model for AnyModel {
    fn dimension(&self) -> usize {
        match self {
            AnyModel::Builtin(m) => m.dimension(),
            AnyModel::External(m) => m.dimension(),
        }
    }

    fn eval_batch(&self, points: &[EvalPoint]) -> Result<Vec<f64>> {
        match self {
            AnyModel::Builtin(m) => m.eval_batch(points),
            AnyModel::External(m) => m.eval_batch(points),
        }
    }
}

// ---------------------------------------------------------------------------
// External models

struct Session {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Session {
    fn spawn(cfg: &ExternalModelConfig) -> std::io::Result<Session> {
        let mut child = Command::new(&cfg.command[0])
            .args(&cfg.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Ok(Session {
            child,
            stdin,
            lines: rx,
        })
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A model hosted by a child process.
///
/// Each request line on the child's stdin is one CSV row of coordinates; the
/// child answers with one floating-point value per line on stdout. Rows of a
/// batch are written and flushed together, then the answers are read back in
/// order. One child serves all calls and access to it is serialized, so
/// concurrent batches queue rather than interleave. After any failure the
/// child is killed and a fresh one is started on the next call.
pub struct ExternalModel {
    dim: usize,
    config: ExternalModelConfig,
    session: Mutex<Option<Session>>,
}

impl ExternalModel {
    pub fn new(dim: usize, config: ExternalModelConfig) -> Self {
        ExternalModel {
            dim,
            config,
            session: Mutex::new(None),
        }
    }

    fn run_batch(&self, session: &mut Session, points: &[EvalPoint]) -> Result<Vec<f64>> {
        let mut payload = String::with_capacity(points.len() * self.dim * 24);
        for p in points {
            payload.push_str(&csv_row(p.coords()));
            payload.push('\n');
        }
        let write = session
            .stdin
            .write_all(payload.as_bytes())
            .and_then(|_| session.stdin.flush());
        if let Err(e) = write {
            return Err(Error::ModelEval {
                row: 0,
                reason: format!("writing to model process: {e}"),
            });
        }
        let timeout = Duration::from_millis(self.config.timeout_ms);
        let mut out = Vec::with_capacity(points.len());
        for row in 0..points.len() {
            let line = match session.lines.recv_timeout(timeout) {
                Ok(Ok(line)) => line,
                Ok(Err(e)) => {
                    return Err(Error::ModelEval {
                        row,
                        reason: format!("reading model output: {e}"),
                    })
                }
                Err(RecvTimeoutError::Timeout) => {
                    return Err(Error::ModelEval {
                        row,
                        reason: format!("no answer within {} ms", self.config.timeout_ms),
                    })
                }
                Err(RecvTimeoutError::Disconnected) => {
                    let status = session
                        .child
                        .wait()
                        .map(|s| s.to_string())
                        .unwrap_or_else(|e| e.to_string());
                    return Err(Error::ModelEval {
                        row,
                        reason: format!("model process exited ({status})"),
                    });
                }
            };
            let value: f64 = line.trim().parse().map_err(|_| Error::ModelEval {
                row,
                reason: format!("malformed output line {line:?}"),
            })?;
            if !value.is_finite() {
                return Err(Error::ModelEval {
                    row,
                    reason: format!("non-finite output {value}"),
                });
            }
            out.push(value);
        }
        Ok(out)
    }
}

impl Model for ExternalModel {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn eval_batch(&self, points: &[EvalPoint]) -> Result<Vec<f64>> {
        check_dims(self.dim, points)?;
        if points.is_empty() {
            return Ok(Vec::new());
        }
        let mut guard = self.session.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            let session = Session::spawn(&self.config).map_err(|e| Error::ModelEval {
                row: 0,
                reason: format!("spawning {:?}: {e}", self.config.command[0]),
            })?;
            *guard = Some(session);
        }
        let session = guard.as_mut().expect("session started");
        let result = self.run_batch(session, points);
        if result.is_err() {
            *guard = None;
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: &[f64]) -> EvalPoint {
        EvalPoint::new(v.to_vec()).unwrap()
    }

    #[test]
    fn wavelike_values() {
        let w = WavelikeParams::default();
        assert_eq!(eval_wavelike(&[0.0; 4], &w).unwrap(), 0.0);
        let sat = eval_wavelike(&[10.0, 0.0, 0.0, 0.0], &w).unwrap();
        assert!((sat - 1.0).abs() < 1e-12);
        // term by term at 0.5
        let t1 = 2.5f64.tanh();
        let t2 = (-0.25f64).exp() * 5.0f64.sin();
        let t3 = 1.5f64.sin() * 1.0f64.cos();
        let t4 = 0.5 * (-0.125f64).exp();
        let v = eval_wavelike(&[0.5; 4], &w).unwrap();
        assert!((v - (t1 + t2 + t3 + t4)).abs() < 1e-14);
        // independently evaluated in double precision
        assert!((v - 1.220_000_614_783_976_8).abs() < 1e-12, "{v}");
    }

    #[test]
    fn wavelike_needs_four_inputs() {
        assert!(matches!(
            eval_wavelike(&[0.0; 3], &WavelikeParams::default()),
            Err(Error::DimensionTooSmall { required: 4, actual: 3, .. })
        ));
        assert!(ModelSpec::builtin(ModelKind::Wavelike, 3, 0).is_err());
    }

    #[test]
    fn radial_values() {
        assert_eq!(eval_radial(&[0.0; 4]), 0.0);
        let r = std::f64::consts::PI / 5.0;
        assert!(eval_radial(&[r / 2f64.sqrt(), r / 2f64.sqrt()]).abs() < 1e-12);
        assert!((eval_radial(&[1.0, 0.0, 0.0, 0.0]) - 5f64.sin() / 1.5).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_values() {
        let p1 = SigmoidParams {
            a: vec![1.0],
            b: vec![1.0],
            c: vec![0.0],
            w: vec![1.0],
        };
        assert!((eval_sigmoid_network(&[1.0], &p1) - 0.731_058_578_6).abs() < 1e-10);
        let p2 = SigmoidParams {
            a: vec![1.5, -0.7],
            b: vec![0.0, 0.0],
            c: vec![0.2, 1.0],
            w: vec![2.0, 3.0],
        };
        let expect = 2.0 * (1.5 * 0.5 + 0.2) + 3.0 * (-0.7 * 0.5 + 1.0);
        assert!((eval_sigmoid_network(&[0.0, 0.0], &p2) - expect).abs() < 1e-15);
        assert!((eval_sigmoid_network(&[4.0, -9.0], &p2) - expect).abs() < 1e-15);
    }

    #[test]
    fn piecewise_values() {
        let p = PiecewiseParams {
            a: vec![2.0],
            b: vec![5.0],
            w: vec![1.0],
        };
        assert_eq!(eval_piecewise_linear(&[-0.5], &p), -1.0);
        assert_eq!(eval_piecewise_linear(&[0.0], &p), 0.0);
        let spec = ModelSpec::builtin(ModelKind::PiecewiseLinear, 3, 11).unwrap();
        let ModelParams::PiecewiseLinear(q) = &spec.params else {
            unreachable!()
        };
        let expect: f64 = (0..3).map(|j| q.w[j] * q.b[j]).sum();
        assert!((spec.eval_point(&[1.0; 3]).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn sampled_params_are_nondegenerate_and_seeded() {
        let a = ModelSpec::builtin(ModelKind::SigmoidNetwork, 6, 3).unwrap();
        let b = ModelSpec::builtin(ModelKind::SigmoidNetwork, 6, 3).unwrap();
        assert_eq!(a, b);
        let ModelParams::SigmoidNetwork(p) = &a.params else {
            unreachable!()
        };
        for v in p.a.iter().chain(&p.b).chain(&p.c).chain(&p.w) {
            assert!((0.1..=2.0).contains(&v.abs()));
        }
        let c = ModelSpec::builtin(ModelKind::SigmoidNetwork, 6, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn batch_matches_pointwise() {
        let spec = ModelSpec::builtin(ModelKind::Radial, 4, 0).unwrap();
        assert!(eval_batch(&spec, &[]).unwrap().is_empty());
        let pts = vec![p(&[0.1, 0.2, 0.3, 0.4]), p(&[1.0, 0.0, 0.0, 0.0]), p(&[-2.0, 1.0, 0.5, 0.0])];
        let batch = eval_batch(&spec, &pts).unwrap();
        for (pt, v) in pts.iter().zip(&batch) {
            assert_eq!(*v, eval_radial(pt.coords()));
            assert_eq!(*v, spec.eval(pt).unwrap());
        }
        assert!(matches!(
            spec.eval(&p(&[1.0, 2.0])),
            Err(Error::Dimension { expected: 4, actual: 2 })
        ));
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let specs = [
            ModelSpec::builtin(ModelKind::Wavelike, 5, 0).unwrap(),
            ModelSpec::builtin(ModelKind::Radial, 4, 0).unwrap(),
            ModelSpec::builtin(ModelKind::SigmoidNetwork, 4, 9).unwrap(),
            ModelSpec::builtin(ModelKind::Linear, 4, 9).unwrap(),
        ];
        let pts = crate::sampling::sample_unit_normal_points(5, 20, 1);
        for spec in &specs {
            for pt in &pts {
                let x = &pt.coords()[..spec.dimension];
                let g = spec.gradient(x).unwrap();
                for j in 0..x.len() {
                    let h = 1e-6;
                    let mut xp = x.to_vec();
                    let mut xm = x.to_vec();
                    xp[j] += h;
                    xm[j] -= h;
                    let fd = (spec.eval_point(&xp).unwrap() - spec.eval_point(&xm).unwrap())
                        / (2.0 * h);
                    assert!((fd - g[j]).abs() < 1e-6 * g[j].abs().max(1.0), "{} d{j}", spec.kind);
                }
            }
        }
    }

    #[test]
    fn json_round_trip_and_errors() {
        for kind in ModelKind::BUILTIN {
            let spec = ModelSpec::builtin_default(kind, 21).unwrap();
            let back = ModelSpec::from_json(&spec.to_json().unwrap()).unwrap();
            assert_eq!(spec, back);
        }
        // params omitted: drawn from the seed
        let s = ModelSpec::from_json(r#"{"kind":"piecewise","seed":5}"#).unwrap();
        assert_eq!(s, ModelSpec::builtin(ModelKind::PiecewiseLinear, 3, 5).unwrap());

        let err = ModelSpec::from_json(r#"{"dimension":3}"#).unwrap_err();
        assert!(err.to_string().contains("`kind`"), "{err}");
        let err =
            ModelSpec::from_json(r#"{"kind":"linear","params":{"intercept":1.0}}"#).unwrap_err();
        assert!(err.to_string().contains("params.coefficients"), "{err}");
        let err = ModelSpec::from_json(
            r#"{"kind":"piecewise_linear","dimension":2,"params":{"a":[1,2],"b":[1],"w":[1,1]}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("params.b"), "{err}");
        let err = ModelSpec::from_json(r#"{"kind":"cubic"}"#).unwrap_err();
        assert!(err.to_string().contains("`kind`"), "{err}");
    }

    fn perl_sum(extra: &str) -> ExternalModelConfig {
        ExternalModelConfig {
            command: vec![
                "perl".into(),
                "-ne".into(),
                format!(
                    "BEGIN {{ $| = 1 }} chomp; {extra} my $s = 0; $s += $_ for split /,/; printf \"%.17g\\n\", $s;"
                ),
            ],
            protocol: WireProtocol::LineCsv,
            timeout_ms: 5_000,
        }
    }

    #[test]
    fn external_model_round_trip() {
        let m = ExternalModel::new(3, perl_sum(""));
        let pts = vec![p(&[0.1, 0.2, 0.3]), p(&[1.0 / 3.0, -2.0, 5.5]), p(&[0.0, 0.0, 0.0])];
        let out = m.eval_batch(&pts).unwrap();
        for (pt, v) in pts.iter().zip(&out) {
            let expect: f64 = pt.coords().iter().sum();
            assert!((v - expect).abs() <= 1e-15 * expect.abs().max(1.0));
        }
        // the same child serves a second batch
        assert_eq!(m.eval_batch(&pts).unwrap(), out);
        assert!(m.eval_batch(&[]).unwrap().is_empty());
    }

    #[test]
    fn external_model_failures_name_the_row() {
        let m = ExternalModel::new(1, perl_sum("if ($_ > 1) { print \"oops\\n\"; next }"));
        match m.eval_batch(&[p(&[0.5]), p(&[2.0])]) {
            Err(Error::ModelEval { row, reason }) => {
                assert_eq!(row, 1);
                assert!(reason.contains("malformed"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let dead = ExternalModel::new(
            1,
            ExternalModelConfig {
                command: vec!["sh".into(), "-c".into(), "exit 3".into()],
                protocol: WireProtocol::LineCsv,
                timeout_ms: 5_000,
            },
        );
        assert!(matches!(dead.eval(&p(&[0.5])), Err(Error::ModelEval { row: 0, .. })));
        let slow = ExternalModel::new(
            1,
            ExternalModelConfig {
                command: vec!["sh".into(), "-c".into(), "sleep 5".into()],
                protocol: WireProtocol::LineCsv,
                timeout_ms: 100,
            },
        );
        match slow.eval(&p(&[0.5])) {
            Err(Error::ModelEval { reason, .. }) => assert!(reason.contains("100 ms")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
