use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use fxstab::format::{csv_row, fmt_f64, to_json};
use fxstab::gate::axis_lattice;
use fxstab::sampling::{sample_unit_normal_points, stream};
use fxstab::study::{run_study_with, write_study_outputs, StudyConfig};
use fxstab::{
    analyze_point, decide, derive_seed, map_unforecastable_region, AnalysisConfig, Error, EvalPoint, ForecastSource,
    GateDecision, InstabilityReport, ModelSpec, UncertaintyReport,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::inputs::{analysis_config, load_fallback, load_model, load_policy, read_points};
use crate::{AnalyzeArgs, Failure, GateArgs, MapArgs, StudyArgs};

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|source| {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|source| {
        Error::Io {
            path: dir.to_path_buf(),
            source,
        }
        .into()
    })
}

fn print_stdout(text: &str) -> Result<(), Failure> {
    std::io::stdout()
        .lock()
        .write_all(text.as_bytes())
        .map_err(|e| Failure {
            code: 2,
            message: format!("standard output: {e}"),
        })
}

#[derive(Serialize)]
struct Explanation<'a> {
    intercept: f64,
    coefficients: &'a [f64],
    residual_variance: f64,
    ridged: bool,
}

#[derive(Serialize)]
struct AnalyzeReport<'a> {
    model: &'a ModelSpec,
    config: &'a AnalysisConfig,
    point: &'a EvalPoint,
    forecast: f64,
    explanation: Explanation<'a>,
    uncertainty: &'a UncertaintyReport,
    instability: &'a InstabilityReport,
}

pub fn analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    let spec = load_model(&args.model)?;
    let cfg = analysis_config(&args.sampling, args.seed);
    let point = EvalPoint::new(args.point)?;
    if point.dim() != spec.dimension {
        return Err(Error::Dimension {
            expected: spec.dimension,
            actual: point.dim(),
        }
        .into());
    }
    cfg.validate(spec.dimension)?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
    }
    let model = spec.instantiate()?;
    let a = analyze_point(&model, &point, &cfg)?;
    let report = AnalyzeReport {
        model: &spec,
        config: &cfg,
        point: &a.point,
        forecast: a.forecast,
        explanation: Explanation {
            intercept: a.surrogate.intercept,
            coefficients: &a.surrogate.beta,
            residual_variance: a.surrogate.residual_variance,
            ridged: a.surrogate.ridged,
        },
        uncertainty: &a.uncertainty,
        instability: &a.instability,
    };
    let mut json = to_json(&report, Some(2))?;
    json.push('\n');
    match &args.out {
        Some(dir) => write_file(&dir.join("analysis.json"), &json),
        None => print_stdout(&json),
    }
}

pub fn study(args: StudyArgs) -> Result<(), Failure> {
    let spec = load_model(&args.model)?;
    let cfg = StudyConfig {
        n_points: args.points,
        analysis: analysis_config(&args.sampling, args.seed),
        log_floor: args.log_floor,
        ..StudyConfig::new(spec, args.seed)
    };
    cfg.validate()?;
    create_dir(&args.out)?;
    let model = cfg.model.instantiate()?;
    let result = run_study_with(&model, &cfg)?;
    let written = write_study_outputs(&result, &args.out)?;
    let mut text = result.summary_table();
    for p in written {
        let _ = writeln!(text, "wrote {}", p.display());
    }
    print_stdout(&text)
}

#[derive(Serialize)]
struct GateRecord<'a> {
    row: usize,
    point: &'a EvalPoint,
    #[serde(flatten)]
    decision: &'a GateDecision,
}

pub fn gate(args: GateArgs) -> Result<(), Failure> {
    let spec = load_model(&args.model)?;
    let policy = load_policy(&args.policy)?;
    let fallback = load_fallback(&args.fallback)?;
    if fallback.dim() != spec.dimension {
        return Err(Error::Config(format!(
            "fallback model has {} features but the model has {}",
            fallback.dim(),
            spec.dimension
        ))
        .into());
    }
    let points = read_points(&args.points, spec.dimension)?;
    let cfg = analysis_config(&args.sampling, args.seed);
    cfg.validate(spec.dimension)?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
    }
    let model = spec.instantiate()?;
    let outcomes: Vec<_> = points
        .par_iter()
        .enumerate()
        .map(|(i, x)| decide(&model, &fallback, &policy, x, &cfg.for_point(i)))
        .collect();
    let mut jsonl = String::new();
    let mut fallbacks = 0usize;
    for (i, (outcome, x)) in outcomes.into_iter().zip(&points).enumerate() {
        let decision = outcome.map_err(|e| {
            let mut f = Failure::from(e);
            f.message = format!("points row {i}: {}", f.message);
            f
        })?;
        if decision.source == ForecastSource::Fallback {
            fallbacks += 1;
        }
        jsonl.push_str(&to_json(
            &GateRecord {
                row: i,
                point: x,
                decision: &decision,
            },
            None,
        )?);
        jsonl.push('\n');
    }
    let summary = if points.is_empty() {
        "fallback fraction: not applicable (0 rows)\n".to_string()
    } else {
        format!(
            "fallback fraction: {} ({fallbacks} of {} rows)\n",
            fmt_f64(fallbacks as f64 / points.len() as f64),
            points.len()
        )
    };
    match &args.out {
        Some(dir) => {
            write_file(&dir.join("decisions.jsonl"), &jsonl)?;
            print_stdout(&summary)
        }
        None => {
            print_stdout(&jsonl)?;
            eprint!("{summary}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct RegionSummary<'a> {
    metric: fxstab::GateMetric,
    probes: usize,
    evaluated: usize,
    exceedance_fraction: f64,
    exceeding: &'a [usize],
    failures: &'a [(usize, String)],
}

pub fn map_regions(args: MapArgs) -> Result<(), Failure> {
    let spec = load_model(&args.model)?;
    let policy = load_policy(&args.policy)?;
    let dim = spec.dimension;
    let probes = if let Some(path) = &args.probes {
        read_points(path, dim)?
    } else if let Some(steps) = args.lattice {
        if steps == 0 || !(args.bound.is_finite() && args.bound > 0.0) {
            return Err(Error::Config("--lattice must be positive and --bound finite and positive".into()).into());
        }
        axis_lattice(dim, -args.bound, args.bound, steps)
    } else {
        sample_unit_normal_points(dim, args.points, derive_seed(args.seed, &[stream::EVAL_POINTS]))
    };
    let cfg = analysis_config(&args.sampling, args.seed);
    cfg.validate(dim)?;
    create_dir(&args.out)?;
    let model = spec.instantiate()?;
    let map = map_unforecastable_region(&model, &policy, &probes, &cfg)?;

    let mut csv = String::from("index");
    for j in 0..dim {
        let _ = write!(csv, ",x{j}");
    }
    csv.push_str(",forecast,metric,threshold,exceeds\n");
    for p in &map.probes {
        let mut row = p.point.coords().to_vec();
        row.extend([p.forecast, p.metric, p.threshold]);
        let _ = writeln!(csv, "{},{},{}", p.index, csv_row(&row), u8::from(p.exceeds));
    }
    write_file(&args.out.join("regions.csv"), &csv)?;
    let summary = RegionSummary {
        metric: map.metric,
        probes: probes.len(),
        evaluated: map.probes.len(),
        exceedance_fraction: map.exceedance_fraction,
        exceeding: &map.exceeding,
        failures: &map.failures,
    };
    let mut json = to_json(&summary, Some(2))?;
    json.push('\n');
    write_file(&args.out.join("regions.json"), &json)?;
    print_stdout(&format!(
        "exceedance fraction: {} ({} of {} evaluated probes, {} failed)\n",
        fmt_f64(map.exceedance_fraction),
        map.exceeding.len(),
        map.probes.len(),
        map.failures.len()
    ))
}
