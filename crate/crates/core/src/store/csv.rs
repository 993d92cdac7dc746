//! Metrics CSV: `case,organ,phase,metric,value` with 6-significant-digit
//! values and canonical row order.

use super::{io_err, Result, StoreError};
use crate::metrics::MetricsReport;
use std::io::Write;
use std::path::Path;

/// Format with 6 significant digits, trimming trailing zeros; switches
/// to exponent notation outside [1e-4, 1e6). Infinities serialize as
/// `inf` / `-inf`.
pub fn format_sig6(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    // Round to 6 significant digits first so the range test uses the
    // rounded magnitude (e.g. 999999.5 -> 1e6).
    let sci = format!("{:.5e}", v);
    let rounded: f64 = sci.parse().expect("formatter output");
    if rounded == 0.0 {
        return "0".into();
    }
    let exp = rounded.abs().log10().floor() as i32;
    if !(-4..6).contains(&exp) {
        let (mant, e) = sci.split_once('e').expect("scientific format");
        let mant = mant.trim_end_matches('0').trim_end_matches('.');
        return format!("{mant}e{e}");
    }
    let decimals = (5 - exp).max(0) as usize;
    let fixed = format!("{:.*}", decimals, rounded);
    if fixed.contains('.') {
        fixed.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        fixed
    }
}

pub fn write_metrics_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut out = String::from("case,organ,phase,metric,value\n");
    for e in report.sorted_entries() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.case_id,
            e.organ,
            e.phase,
            e.metric,
            format_sig6(e.value)
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| io_err(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut report = MetricsReport::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "case,organ,phase,metric,value" {
                return Err(StoreError::Malformed {
                    what: "metrics csv header",
                    line: 1,
                    detail: line.to_string(),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(StoreError::Malformed {
                what: "metrics csv row",
                line: i + 1,
                detail: format!("{} columns", cols.len()),
            });
        }
        let phase: u32 = cols[2].parse().map_err(|_| StoreError::Malformed {
            what: "metrics csv phase",
            line: i + 1,
            detail: cols[2].to_string(),
        })?;
        let value: f64 = match cols[4] {
            "inf" => f64::INFINITY,
            "-inf" => f64::NEG_INFINITY,
            s => s.parse().map_err(|_| StoreError::Malformed {
                what: "metrics csv value",
                line: i + 1,
                detail: s.to_string(),
            })?,
        };
        report.push(cols[0], cols[1], phase, cols[3], value);
    }
    Ok(report)
}
