//! Locale-independent numeric output.
//!
//! Every floating-point value that leaves the toolkit (CSV bodies, JSON
//! documents, the external-model wire protocol) is written with 17
//! significant digits in scientific notation with a lowercase `e`, which
//! round-trips any `f64` exactly.

use std::fmt::Write as _;

use serde::Serialize;
use serde_json::Value;

use crate::error::Result;

/// Formats `x` with 17 significant digits, e.g. `-2.5000000000000000e-3`.
///
/// Non-finite values are written as `NaN`, `inf` and `-inf`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// Joins values into one comma-separated line (no trailing newline).
pub fn csv_row(values: &[f64]) -> String {
    let mut line = String::with_capacity(values.len() * 24);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            line.push(',');
        }
        line.push_str(&fmt_f64(*v));
    }
    line
}

/// Serializes `value` as JSON with every float in 17-significant-digit form.
///
/// `indent = None` gives a single line (used for JSONL records); otherwise
/// nested values are indented by the given number of spaces. Non-finite
/// floats become `null`.
pub fn to_json<T: Serialize + ?Sized>(value: &T, indent: Option<usize>) -> Result<String> {
    let tree = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&mut out, &tree, indent, 0);
    Ok(out)
}

fn write_value(out: &mut String, v: &Value, indent: Option<usize>, depth: usize) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                let _ = write!(out, "{u}");
            } else if let Some(i) = n.as_i64() {
                let _ = write!(out, "{i}");
            } else {
                match n.as_f64() {
                    Some(f) if f.is_finite() => out.push_str(&fmt_f64(f)),
                    _ => out.push_str("null"),
                }
            }
        }
        Value::String(s) => {
            // serde_json handles escaping
            out.push_str(&serde_json::to_string(s).expect("string serialization"));
        }
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            // numeric arrays stay on one line even in pretty mode
            let flat = items.iter().all(|x| !x.is_array() && !x.is_object());
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                if flat {
                    if i > 0 && indent.is_some() {
                        out.push(' ');
                    }
                } else {
                    newline(out, indent, depth + 1);
                }
                write_value(out, item, indent, depth + 1);
            }
            if !flat {
                newline(out, indent, depth);
            }
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push('{');
            for (i, (key, item)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                newline(out, indent, depth + 1);
                out.push_str(&serde_json::to_string(key).expect("key serialization"));
                out.push(':');
                if indent.is_some() {
                    out.push(' ');
                }
                write_value(out, item, indent, depth + 1);
            }
            newline(out, indent, depth);
            out.push('}');
        }
    }
}

fn newline(out: &mut String, indent: Option<usize>, depth: usize) {
    if let Some(width) = indent {
        out.push('\n');
        for _ in 0..width * depth {
            out.push(' ');
        }
    }
}
