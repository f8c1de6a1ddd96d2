use std::path::Path;
use std::process::{Command, Output};

fn fxstab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fxstab")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write(dir: &Path, name: &str, contents: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, contents).unwrap();
    p.to_str().unwrap().to_string()
}

/// External model that fails (prints garbage) whenever the first coordinate
/// is positive and otherwise returns the coordinate sum.
fn failing_model(dir: &Path) -> String {
    write(
        dir,
        "model.json",
        r#"{"kind": "external", "dimension": 2, "params": {"command": ["perl", "-ne",
            "BEGIN { $| = 1 } chomp; my @x = split /,/; if ($x[0] > 0) { print \"nope\\n\"; next } printf \"%.17g\\n\", $x[0] + $x[1];"]}}"#,
    )
}

#[test]
fn analyze_linear_model() {
    let o = fxstab(&["analyze", "--model", "linear", "--point=0.5,-1,2,0.25"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["uncertainty"]["local_linear_rmse"].as_f64().unwrap() <= 1e-8);
    assert_eq!(v["explanation"]["coefficients"].as_array().unwrap().len(), 4);
    assert_eq!(v["config"]["samples"], 200);
    assert!(stdout(&o).contains("e-"), "floats use exponent form");
}

#[test]
fn malformed_model_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", r#"{"kind": "linear", "params": {"coefficients": [1, "x"], "intercept": 0}}"#);
    let o = fxstab(&["analyze", "--model", &bad, "--point", "0,0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("params.coefficients[1]"), "{}", stderr(&o));

    let missing = write(dir.path(), "missing.json", r#"{"dimension": 2}"#);
    let o = fxstab(&["analyze", "--model", &missing, "--point", "0,0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kind"), "{}", stderr(&o));
}

#[test]
fn configuration_errors_exit_2() {
    for args in [
        vec!["analyze", "--model", "no-such-model", "--point", "0"],
        vec!["analyze", "--model", "radial", "--point", "0,0"],
        vec!["analyze", "--model", "radial", "--point", "0,0,0,0", "--sigma-pert", "-1"],
        vec!["study", "--model", "radial", "--points", "10"],
    ] {
        let o = fxstab(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn model_failure_exits_3_with_row() {
    let dir = tempfile::tempdir().unwrap();
    let model = failing_model(dir.path());
    let o = fxstab(&["analyze", "--model", &model, "--point=0.5,0.1"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let policy = write(dir.path(), "policy.json", r#"{"metric": "conformal_sd", "default_threshold": 1.0}"#);
    let fallback = write(
        dir.path(),
        "fallback.json",
        r#"{"coefficients": [1, 1], "intercept": 0, "training_stats": {"means": [0, 0], "deviations": [1, 1]}}"#,
    );
    let points = write(dir.path(), "points.csv", "-1.5,0.2\n1.5,0.2\n");
    let o = fxstab(&["gate", "--model", &model, "--policy", &policy, "--fallback", &fallback, "--points", &points]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("points row 1"), "{}", stderr(&o));
}

#[test]
fn study_aborts_with_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let model = failing_model(dir.path());
    let out = dir.path().join("out");
    let o = fxstab(&[
        "study", "--model", &model, "--seed", "1", "--points", "12", "--samples", "20", "--replicates", "3", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn study_writes_artifacts_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let args = [
        "study", "--model", "wavelike", "--seed", "7", "--points", "30", "--samples", "60", "--replicates", "6", "--out",
        out.to_str().unwrap(),
    ];
    let o = fxstab(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.contains("log_local_linear_rmse"));
    assert!(table.contains("R^2"));
    for f in ["per_point.csv", "correlations.csv", "fits.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let first = std::fs::read(out.join("correlations.csv")).unwrap();
    assert!(fxstab(&args).status.success());
    assert_eq!(std::fs::read(out.join("correlations.csv")).unwrap(), first);
}

#[test]
fn gate_reports_fractions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut train = String::from("x0,x1,x2,y\n");
    for i in 0..20 {
        let t = i as f64 / 7.0;
        train += &format!("{},{},{},{}\n", t.sin(), (2.0 * t).cos(), t - 1.0, t);
    }
    let train = write(d, "train.csv", &train);
    let empty = write(d, "empty.csv", "");
    let loose = write(d, "loose.json", r#"{"metric": "local_linear_rmse", "default_threshold": 100.0}"#);
    let tight = write(d, "tight.json", r#"{"metric": "local_linear_rmse", "default_threshold": 0.02}"#);

    let o = fxstab(&["gate", "--model", "piecewise", "--policy", &loose, "--fallback", &train, "--points", &empty]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
    assert!(stderr(&o).contains("not applicable"));

    let mut grid = String::new();
    for i in 0..21 {
        let x0 = -1.0 + 0.1 * i as f64;
        grid += &format!("{x0},0.8,-0.9\n");
    }
    let grid = write(d, "grid.csv", &grid);
    let o = fxstab(&["gate", "--model", "piecewise", "--policy", &loose, "--fallback", &train, "--points", &grid]);
    assert!(stderr(&o).contains("fallback fraction: 0.0000000000000000e0 (0 of 21 rows)"), "{}", stderr(&o));

    let out = d.join("g");
    let o = fxstab(&[
        "gate", "--model", "piecewise", "--policy", &tight, "--fallback", &train, "--points", &grid, "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = std::fs::read_to_string(out.join("decisions.jsonl")).unwrap();
    let (mut near, mut near_n, mut far, mut far_n) = (0, 0, 0, 0);
    for (i, line) in lines.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["row"], i);
        let fell_back = v["source"] == "fallback";
        if v["point"][0].as_f64().unwrap().abs() < 0.25 {
            near += usize::from(fell_back);
            near_n += 1;
        } else {
            far += usize::from(fell_back);
            far_n += 1;
        }
    }
    assert!(near > 0);
    assert!(near as f64 / near_n as f64 > far as f64 / far_n as f64);
}

#[test]
fn map_regions_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let policy = write(dir.path(), "p.json", r#"{"metric": "local_linear_rmse", "default_threshold": 1e-6}"#);
    let out = dir.path().join("m");
    let o = fxstab(&[
        "map-regions", "--model", "linear", "--dimension", "2", "--policy", &policy, "--seed", "1", "--points", "15",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("exceedance fraction: 0.0000000000000000e0"));
    let csv = std::fs::read_to_string(out.join("regions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 16);
    assert!(csv.starts_with("index,x0,x1,forecast,metric,threshold,exceeds\n"));
}
