//! CSV and JSON artifacts. Floats are written with Rust's shortest
//! round-trip formatting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use meanfield_core::grid::ScalarField;
use meanfield_core::hsdp::StackedDensity;
use serde::Serialize;

pub struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, content: &str) -> std::io::Result<()> {
        std::fs::write(self.dir.join(name), content)?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        log::info!("wrote {}", self.dir.join(name).display());
        Ok(())
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }
}

fn coordinate_header(dim: usize) -> &'static str {
    if dim == 1 {
        "x"
    } else {
        "x,y"
    }
}

fn write_coords(out: &mut String, p: [f64; 2], dim: usize) {
    let _ = write!(out, "{:?}", p[0]);
    if dim == 2 {
        let _ = write!(out, ",{:?}", p[1]);
    }
}

/// `cell,x[,y],value`.
pub fn field_csv(f: &ScalarField) -> String {
    let d = f.domain();
    let mut out = format!("cell,{},value\n", coordinate_header(d.dim()));
    for (c, v) in f.values().iter().enumerate() {
        let _ = write!(out, "{c},");
        write_coords(&mut out, d.center(c), d.dim());
        let _ = writeln!(out, ",{v:?}");
    }
    out
}

/// `t,cell,value` rows for a sequence of snapshots.
pub fn trajectory_csv(samples: &[(f64, ScalarField)]) -> String {
    let mut out = String::from("t,cell,value\n");
    for (t, f) in samples {
        for (c, v) in f.values().iter().enumerate() {
            let _ = writeln!(out, "{t:?},{c},{v:?}");
        }
    }
    out
}

/// `t,state,cell,value` rows (states 1-based).
pub fn stacked_trajectory_csv(samples: &[(f64, StackedDensity)]) -> String {
    let mut out = String::from("t,state,cell,value\n");
    for (t, y) in samples {
        y.write_csv_rows(*t, &mut out);
    }
    out
}

/// Columns from `header`, one row per entry of `rows`.
pub fn table_csv(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Check {
    pub metric: String,
    pub value: Option<f64>,
    pub bound: f64,
    pub kind: &'static str,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub name: String,
    pub command: String,
    pub passed: bool,
    pub checks: Vec<Check>,
}

/// Compares metrics against tolerance keys; `min_<metric>` is a lower bound,
/// any other key an upper bound on the metric of the same name.
pub fn evaluate(tolerances: &BTreeMap<String, f64>, metrics: &BTreeMap<String, f64>) -> Vec<Check> {
    tolerances
        .iter()
        .map(|(key, &bound)| {
            let (metric, lower) = match key.strip_prefix("min_") {
                Some(m) if metrics.contains_key(m) => (m, true),
                _ => (key.as_str(), false),
            };
            let value = metrics.get(metric).copied();
            let passed = match value {
                Some(v) if lower => v >= bound,
                Some(v) => v <= bound,
                None => false,
            };
            Check {
                metric: metric.to_string(),
                value: value.filter(|v| v.is_finite()),
                bound,
                kind: if lower { "min" } else { "max" },
                passed,
            }
        })
        .collect()
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}
