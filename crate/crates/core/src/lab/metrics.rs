use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LabError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricsFormat {
    #[default]
    Csv,
    Jsonl,
}

impl MetricsFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            MetricsFormat::Csv => "csv",
            MetricsFormat::Jsonl => "jsonl",
        }
    }
}

impl std::str::FromStr for MetricsFormat {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self, LabError> {
        match s {
            "csv" => Ok(MetricsFormat::Csv),
            "jsonl" => Ok(MetricsFormat::Jsonl),
            other => Err(LabError::Metrics(format!("unknown metrics format '{}'", other))),
        }
    }
}

/// One training step. Gradient norms are per phase; `grad_clipped` is the
/// norm after clipping, i.e. what the optimizer used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub grad_positive: f64,
    pub grad_negative: f64,
    pub grad_kl_entropy: Option<f64>,
    pub grad_kl_opt: Option<f64>,
    pub grad_total: f64,
    pub grad_clipped: f64,
    pub data_energy: f64,
    pub sample_energy: Option<f64>,
    pub mode_coverage: Option<f64>,
    /// Fraction of chains whose nearest mode changed between init and final.
    pub transition_rate: Option<f64>,
    pub acceptance: Option<f64>,
    pub oracle_cosine: Option<f64>,
    pub skipped: bool,
    pub wall_secs: f64,
}

impl MetricsRecord {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &MetricsRecord) -> bool {
        let mut a = self.clone();
        a.wall_secs = other.wall_secs;
        a == *other
    }
}

/// Append-only log with strictly increasing steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<MetricsRecord>) -> Result<Self, LabError> {
        let mut log = Self::new();
        for r in records {
            log.push(r)?;
        }
        Ok(log)
    }

    pub fn push(&mut self, record: MetricsRecord) -> Result<(), LabError> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(LabError::Metrics(format!(
                    "step {} does not follow step {}",
                    record.step, last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    pub fn same_outcome(&self, other: &MetricsLog) -> bool {
        self.len() == other.len() && self.records.iter().zip(&other.records).all(|(a, b)| a.same_outcome(b))
    }
}

/// Writes one row (CSV, with header) or one object (JSONL) per record.
pub fn emit_metrics<W: Write>(log: &[MetricsRecord], format: MetricsFormat, w: W) -> Result<(), LabError> {
    if log.is_empty() {
        return Err(LabError::Metrics("nothing to emit".into()));
    }
    match format {
        MetricsFormat::Csv => {
            let mut wr = csv::Writer::from_writer(w);
            for r in log {
                wr.serialize(r)?;
            }
            wr.flush()?;
        }
        MetricsFormat::Jsonl => {
            let mut w = w;
            for r in log {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn write_metrics(log: &[MetricsRecord], format: MetricsFormat, path: &Path) -> Result<(), LabError> {
    if log.is_empty() {
        return Err(LabError::Metrics("nothing to emit".into()));
    }
    let f = std::fs::File::create(path)?;
    emit_metrics(log, format, std::io::BufWriter::new(f))
}

pub fn parse_metrics<R: Read>(r: R, format: MetricsFormat) -> Result<Vec<MetricsRecord>, LabError> {
    match format {
        MetricsFormat::Csv => {
            let mut rd = csv::Reader::from_reader(r);
            Ok(rd.deserialize().collect::<Result<Vec<MetricsRecord>, _>>()?)
        }
        MetricsFormat::Jsonl => {
            let mut out = Vec::new();
            for line in BufReader::new(r).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                out.push(serde_json::from_str(&line)?);
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64) -> MetricsRecord {
        MetricsRecord {
            step,
            grad_positive: 0.1 * step as f64 + 1.0 / 3.0,
            grad_negative: 2.5e-7,
            grad_kl_entropy: if step % 2 == 0 { Some(1e-300) } else { None },
            grad_kl_opt: None,
            grad_total: 0.7,
            grad_clipped: 0.1,
            data_energy: -1.25,
            sample_energy: Some(std::f64::consts::PI),
            mode_coverage: Some(0.875),
            transition_rate: None,
            acceptance: Some(0.6),
            oracle_cosine: None,
            skipped: step == 2,
            wall_secs: 0.001,
        }
    }

    #[test]
    fn empty_log_is_an_error() {
        let err = emit_metrics(&[], MetricsFormat::Csv, Vec::new()).unwrap_err();
        assert!(err.to_string().contains("nothing to emit"));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let log: Vec<_> = (1..=3).map(rec).collect();
        let mut buf = Vec::new();
        emit_metrics(&log, MetricsFormat::Csv, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("step,"));
        assert_eq!(parse_metrics(buf.as_slice(), MetricsFormat::Csv).unwrap(), log);
    }

    #[test]
    fn jsonl_round_trip() {
        let log: Vec<_> = (1..=3).map(rec).collect();
        let mut buf = Vec::new();
        emit_metrics(&log, MetricsFormat::Jsonl, &mut buf).unwrap();
        assert_eq!(parse_metrics(buf.as_slice(), MetricsFormat::Jsonl).unwrap(), log);
    }

    #[test]
    fn steps_must_increase() {
        let mut log = MetricsLog::new();
        log.push(rec(1)).unwrap();
        assert!(log.push(rec(1)).is_err());
        log.push(rec(5)).unwrap();
        assert_eq!(log.len(), 2);
    }
}
