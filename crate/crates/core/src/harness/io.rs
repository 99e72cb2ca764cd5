//! `samples.csv`, `aggregate.csv` and `summary.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use super::config::ExperimentConfig;
use super::experiments::RunOutput;
use crate::error::{Error, Result};

pub const SAMPLES_FILE: &str = "samples.csv";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const SUMMARY_FILE: &str = "summary.json";

fn num(v: f64) -> String {
    // shortest round-trip form; NaN stays NaN
    format!("{v}")
}

impl RunOutput {
    /// The part of the summary that must reproduce exactly: everything but
    /// the metadata block and the config echo (whose thread count may differ).
    pub fn payload(&self) -> Value {
        json!({
            "config_hash": self.config_hash,
            "results": self.results,
            "checks": self.checks,
        })
    }

    pub fn summary(&self) -> Value {
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        json!({
            "config": self.config,
            "config_hash": self.config_hash,
            "passed": self.passed(),
            "results": self.results,
            "checks": self.checks,
            "metadata": {
                "version": env!("CARGO_PKG_VERSION"),
                "threads": self.config.threads,
                "wall_time_s": self.wall_time_s,
                "unix_time": stamp,
                "samples": self.samples.len(),
            },
        })
    }

    pub fn samples_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut head = vec!["n".to_string(), "replica".into(), "seed".into()];
        head.extend(self.columns.iter().cloned());
        w.write_record(&head)?;
        for r in &self.samples {
            let mut rec = vec![r.n.to_string(), r.replica.to_string(), r.seed.to_string()];
            rec.extend(r.values.iter().map(|&v| num(v)));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn aggregate_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "n", "field", "count", "mean", "sd", "stderr", "min", "q05", "q25", "median", "q75", "q95", "max", "mean_abs",
            "median_abs", "kurtosis",
        ])?;
        for a in &self.aggregate {
            let s = &a.summary;
            let mut rec = vec![a.n.to_string(), a.field.clone(), s.count.to_string()];
            rec.extend(
                [s.mean, s.sd, s.stderr, s.min, s.q05, s.q25, s.median, s.q75, s.q95, s.max, s.mean_abs, s.median_abs, s.kurtosis]
                    .iter()
                    .map(|&v| num(v)),
            );
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    /// Write the three artifacts into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let paths = [dir.join(SAMPLES_FILE), dir.join(AGGREGATE_FILE), dir.join(SUMMARY_FILE)];
        fs::write(&paths[0], self.samples_csv()?)?;
        fs::write(&paths[1], self.aggregate_csv()?)?;
        fs::write(&paths[2], serde_json::to_vec_pretty(&self.summary())?)?;
        Ok(paths.to_vec())
    }
}

/// The config embedded in a `summary.json`.
pub fn config_from_summary(path: &Path) -> Result<ExperimentConfig> {
    let v: Value = serde_json::from_slice(&fs::read(path)?)?;
    let cfg = v.get("config").cloned().ok_or_else(|| Error::Config(format!("{} has no config block", path.display())))?;
    let cfg: ExperimentConfig = serde_json::from_value(cfg).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// The reproducible part of a stored summary (see [`RunOutput::payload`]).
pub fn payload_from_summary(path: &Path) -> Result<Value> {
    let v: Value = serde_json::from_slice(&fs::read(path)?)?;
    Ok(json!({
        "config_hash": v["config_hash"],
        "results": v["results"],
        "checks": v["checks"],
    }))
}
