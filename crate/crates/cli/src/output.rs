//! CSV tables and the run report.
//!
//! Every CSV starts with a `# config-fingerprint:` comment line, then a
//! header row; floats use `%.12g`. Wall times go only into the report, so
//! reruns with the same seed reproduce the CSVs byte for byte.

use std::path::Path;
use std::time::Duration;

use anyhow::Context;
use jumpbsde::stats::fmt_g;
use serde_json::{json, Map, Value};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub name: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable { name: String::new(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }

    pub fn row(&mut self, values: &[f64]) {
        self.rows.push(values.iter().map(|v| fmt_g(*v)).collect());
    }

    /// Missing values become empty fields.
    pub fn row_opt(&mut self, values: &[Option<f64>]) {
        self.rows.push(values.iter().map(|v| v.map(fmt_g).unwrap_or_default()).collect());
    }

    pub fn row_labeled(&mut self, label: &str, values: &[Option<f64>]) {
        let mut r = vec![label.to_string()];
        r.extend(values.iter().map(|v| v.map(fmt_g).unwrap_or_default()));
        self.rows.push(r);
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn to_string(&self, fingerprint: &str) -> anyhow::Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let body = String::from_utf8(w.into_inner().context("flushing CSV")?)?;
        Ok(format!("# config-fingerprint: {fingerprint}\n{body}"))
    }

    pub fn write(&self, path: &Path, fingerprint: &str) -> anyhow::Result<()> {
        std::fs::write(path, self.to_string(fingerprint)?).with_context(|| format!("writing {}", path.display()))
    }
}

/// Run report written as `report.json` and `report.txt`.
#[derive(Debug, Clone)]
pub struct Report {
    command: String,
    config_toml: String,
    fingerprint: String,
    seed: u64,
    warnings: Vec<String>,
    timings: Vec<(String, f64)>,
    headline: Map<String, Value>,
    artifacts: Vec<String>,
    failure: Option<Value>,
}

pub const SEED_SCHEME: &str = "every random stream is ChaCha8 keyed by (root seed, purpose, index); \
purposes: paths=1 (index = path), net-init=2 (index = step), shuffle=3, split=4, resample=5, \
rate-experiment=6 (index = path), oracle=7; the solver and oracles receive subseeds derived the same way";

impl Report {
    pub fn new(command: &str, config: &RunConfig, fingerprint: &str, warnings: &[String]) -> Self {
        Report {
            command: command.into(),
            config_toml: toml::to_string(config).unwrap_or_default(),
            fingerprint: fingerprint.into(),
            seed: config.seed,
            warnings: warnings.to_vec(),
            timings: Vec::new(),
            headline: Map::new(),
            artifacts: Vec::new(),
            failure: None,
        }
    }

    pub fn time(&mut self, label: &str, d: Duration) {
        self.timings.push((label.into(), d.as_secs_f64()));
    }

    pub fn headline(&mut self, key: &str, value: Value) {
        self.headline.insert(key.into(), value);
    }

    pub fn artifact(&mut self, name: &str) {
        self.artifacts.push(name.into());
    }

    pub fn failure(&mut self, err: &anyhow::Error) {
        let kind = match err.downcast_ref::<jumpbsde::Error>() {
            Some(jumpbsde::Error::Quadrature { .. }) => "quadrature",
            Some(jumpbsde::Error::InvalidArgument(_)) => "invalid-argument",
            Some(jumpbsde::Error::Dimension(_)) => "dimension",
            Some(jumpbsde::Error::InvalidPaths { .. }) => "invalid-paths",
            Some(jumpbsde::Error::Divergence { .. }) => "divergence",
            Some(jumpbsde::Error::FixedPoint { .. }) => "fixed-point",
            Some(jumpbsde::Error::IndexOutOfRange { .. }) => "index-out-of-range",
            Some(jumpbsde::Error::Contract(_)) => "contract",
            Some(jumpbsde::Error::Format(_)) => "format",
            Some(jumpbsde::Error::Io(_)) => "io",
            None => "run",
        };
        self.failure = Some(json!({ "kind": kind, "message": format!("{err:#}") }));
    }

    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    pub fn to_json(&self) -> Value {
        json!({
            "status": if self.succeeded() { "ok" } else { "error" },
            "command": self.command,
            "config_fingerprint": self.fingerprint,
            "seed": self.seed,
            "seed_scheme": SEED_SCHEME,
            "warnings": self.warnings,
            "headline": self.headline,
            "artifacts": self.artifacts,
            "wall_seconds": self.timings.iter().map(|(k, v)| (k.clone(), json!(v))).collect::<Map<_, _>>(),
            "failure": self.failure,
            "config": self.config_toml,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let status = if self.succeeded() { "ok" } else { "FAILED" };
        s.push_str(&format!("jumpbsde {}: {status}\n", self.command));
        s.push_str(&format!("config fingerprint: {}\nseed: {}\n", self.fingerprint, self.seed));
        s.push_str(&format!("seed scheme: {SEED_SCHEME}\n"));
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        if let Some(f) = &self.failure {
            s.push_str(&format!("failure ({}): {}\n", f["kind"].as_str().unwrap_or(""), f["message"].as_str().unwrap_or("")));
        }
        if !self.headline.is_empty() {
            s.push_str("\nresults\n");
            for (k, v) in &self.headline {
                let shown = match v {
                    Value::Number(n) => n.as_f64().map(fmt_g).unwrap_or_else(|| n.to_string()),
                    other => other.to_string(),
                };
                s.push_str(&format!("  {k}: {shown}\n"));
            }
        }
        if !self.timings.is_empty() {
            s.push_str("\nwall time (s)\n");
            for (k, v) in &self.timings {
                s.push_str(&format!("  {k}: {v:.3}\n"));
            }
        }
        if !self.artifacts.is_empty() {
            s.push_str(&format!("\nartifacts: {}\n", self.artifacts.join(", ")));
        }
        s.push_str("\nconfiguration\n");
        for line in self.config_toml.lines() {
            s.push_str(&format!("  {line}\n"));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.to_json())? + "\n")?;
        std::fs::write(dir.join("report.txt"), self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut t = CsvTable::new(&["a", "b"]);
        t.row(&[0.1, 1e-5]);
        t.row_opt(&[None, Some(2.0)]);
        assert_eq!(t.to_string("abc").unwrap(), "# config-fingerprint: abc\na,b\n0.1,1e-05\n,2\n");
    }
}
