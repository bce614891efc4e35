//! Line-delimited metrics log: one JSON record per event with fields
//! `step`, `metric`, `value`. Records carry no timestamps so identical runs
//! produce identical logs.

use crate::error::{Result, SdError};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub metric: String,
    pub value: f64,
}

pub struct MetricsLogger {
    out: std::io::BufWriter<std::fs::File>,
}

impl MetricsLogger {
    pub fn create(path: &Path) -> Result<MetricsLogger> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = std::fs::File::create(path)?;
        Ok(MetricsLogger {
            out: std::io::BufWriter::new(file),
        })
    }

    pub fn log(&mut self, step: u64, metric: &str, value: f64) -> Result<()> {
        let record = MetricRecord {
            step,
            metric: metric.to_string(),
            value,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| SdError::Format(format!("metric serialization: {e}")))?;
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Read a full metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricRecord = serde_json::from_str(&line)
            .map_err(|e| SdError::Format(format!("metrics line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Values of one metric ordered by step.
pub fn series(records: &[MetricRecord], metric: &str) -> Vec<(u64, f64)> {
    let mut out: Vec<(u64, f64)> = records
        .iter()
        .filter(|r| r.metric == metric)
        .map(|r| (r.step, r.value))
        .collect();
    out.sort_by_key(|(s, _)| *s);
    out
}
