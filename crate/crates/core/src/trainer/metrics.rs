use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossReport;

pub const METRICS_HEADER: &str = "step,intra,inter,recon,cycle,adv_d,adv_g,kl,ce,total";

/// One logged row: component averages over the preceding log interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub report: LossReport,
    /// Milliseconds since the trainer was constructed.
    pub wall_ms: f64,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loss columns only, so equal runs give equal bytes.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        write!(s, "{}", r.step).unwrap();
        for v in r.report.values() {
            write!(s, ",{v:.4}").unwrap();
        }
        s.push('\n');
    }
    write(path, &s)
}

pub fn write_timing_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut s = String::from("step,wall_ms\n");
    for r in rows {
        writeln!(s, "{},{:.4}", r.step, r.wall_ms).unwrap();
    }
    write(path, &s)
}

/// Parse a metrics CSV into `(step, column values)` rows keyed by the
/// header. Missing loss columns are reported by name.
pub fn parse_metrics_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fmt = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| fmt("empty file".into()))?
        .split(',')
        .map(|c| c.trim().to_string())
        .collect();
    for want in METRICS_HEADER.split(',') {
        if !header.iter().any(|h| h == want) {
            return Err(fmt(format!("missing column '{want}'")));
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| fmt(format!("line {}: {e}", i + 2)))?;
        if vals.len() != header.len() {
            return Err(fmt(format!(
                "line {}: expected {} fields, found {}",
                i + 2,
                header.len(),
                vals.len()
            )));
        }
        rows.push(vals);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_four_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![MetricsRow {
            step: 10,
            report: LossReport {
                recon: 0.123456,
                total: 2.0,
                ..Default::default()
            },
            wall_ms: 5.0,
        }];
        write_metrics_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "10,0.0000,0.0000,0.1235,0.0000,0.0000,0.0000,0.0000,0.0000,2.0000"
        );
        let (h, r) = parse_metrics_csv(&p).unwrap();
        assert_eq!(h.len(), 10);
        assert_eq!(r[0][3], 0.1235);
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "step,intra,inter,cycle,adv_d,adv_g,kl,ce,total\n").unwrap();
        let err = parse_metrics_csv(&p).unwrap_err().to_string();
        assert!(err.contains("recon"), "{err}");
    }
}
