//! report.json and CSV writers.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};

use crate::spectrum::ProfilePoint;

/// A computed scalar with its absolute tolerance.
pub fn num(value: f64, tol: f64) -> Value {
    json!({ "value": value, "tol": tol })
}

/// A Monte Carlo estimate with its standard error.
pub fn est(value: f64, se: f64) -> Value {
    json!({ "value": value, "se": se })
}

/// An input or threshold, with the setting it came from.
pub fn exact(value: f64, source: &str) -> Value {
    json!({ "value": value, "tol": 0.0, "source": source })
}

pub fn exact_list(values: &[f64], source: &str) -> Value {
    Value::Array(values.iter().map(|v| exact(*v, source)).collect())
}

pub struct Report {
    pub dir: PathBuf,
    pub task: String,
    pub inputs: Map<String, Value>,
    pub results: Map<String, Value>,
    pub files: Vec<String>,
}

impl Report {
    pub fn new(dir: PathBuf, task: &str) -> Report {
        Report { dir, task: task.to_string(), inputs: Map::new(), results: Map::new(), files: vec![] }
    }

    pub fn set(&mut self, key: &str, v: Value) {
        self.results.insert(key.to_string(), v);
    }

    pub fn input(&mut self, key: &str, v: Value) {
        self.inputs.insert(key.to_string(), v);
    }

    pub fn write_file(&mut self, name: &str, body: &[u8]) -> io::Result<()> {
        fs::write(self.dir.join(name), body)?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn profile_csv(&mut self, name: &str, dim: usize, pts: &[ProfilePoint]) -> io::Result<()> {
        let mut s = header(dim, &["regime", "value"]);
        for p in pts {
            row_x(&mut s, &p.x);
            let _ = writeln!(s, "{},{:e}", p.regime + 1, p.value);
        }
        self.write_file(name, s.as_bytes())
    }

    pub fn finish(&self, status: &str, error: Option<&str>) -> io::Result<()> {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let mut files = self.files.clone();
        files.sort();
        let doc = json!({
            "task": self.task,
            "status": status,
            "error": error,
            "inputs": Value::Object(self.inputs.clone()),
            "results": Value::Object(self.results.clone()),
            "files": files,
            "timestamp": ts,
        });
        let mut text = serde_json::to_string_pretty(&doc).map_err(io::Error::other)?;
        text.push('\n');
        fs::write(self.dir.join("report.json"), text)
    }
}

/// `x1..xd` followed by the given columns.
pub fn header(dim: usize, rest: &[&str]) -> String {
    let mut cols: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
    cols.extend(rest.iter().map(|s| s.to_string()));
    cols.join(",") + "\n"
}

pub fn row_x(s: &mut String, x: &[f64]) {
    for v in x {
        let _ = write!(s, "{v},");
    }
}

pub fn lambdas_csv(radii: &[f64], lambdas: &[f64], brackets: &[(f64, f64)]) -> String {
    let mut s = String::from("radius,lambda,bracket_lo,bracket_hi\n");
    for ((r, l), (lo, hi)) in radii.iter().zip(lambdas).zip(brackets) {
        let _ = writeln!(s, "{r},{l:e},{lo:e},{hi:e}");
    }
    s
}

/// Strips the timestamp so two reports can be compared.
pub fn without_timestamp(path: &Path) -> io::Result<Value> {
    let text = fs::read_to_string(path)?;
    let mut v: Value = serde_json::from_str(&text).map_err(io::Error::other)?;
    if let Some(o) = v.as_object_mut() {
        o.remove("timestamp");
    }
    Ok(v)
}
