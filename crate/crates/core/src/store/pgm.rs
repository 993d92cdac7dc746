//! Binary PGM (P5) export for difference heatmaps.

use super::{io_err, Result, StoreError};
use crate::numcore::{Real, Tensor};
use std::io::Write;
use std::path::Path;

/// Write a nonnegative 2D map as 8-bit P5:
/// `pixel = round(255 · min(diff, vmax) / vmax)`.
pub fn write_pgm_heatmap<R: Real>(diff: &Tensor<R>, vmax: f64, path: &Path) -> Result<()> {
    assert!(vmax > 0.0, "vmax must be positive");
    let (h, w) = diff.dims2().map_err(|e| StoreError::Malformed {
        what: "heatmap shape",
        line: 0,
        detail: e.to_string(),
    })?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in diff.data() {
        let clipped = v.to_f64().clamp(0.0, vmax);
        bytes.push((255.0 * clipped / vmax).round() as u8);
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&bytes).map_err(|e| io_err(path, e))
}

/// Read back a P5 file written by [`write_pgm_heatmap`].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let header_end = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .nth(2)
        .map(|(i, _)| i + 1)
        .ok_or(StoreError::Malformed {
            what: "pgm header",
            line: 0,
            detail: "fewer than 3 header lines".into(),
        })?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|e| StoreError::Malformed {
        what: "pgm header",
        line: 0,
        detail: e.to_string(),
    })?;
    let mut lines = header.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != "P5" {
        return Err(StoreError::Malformed {
            what: "pgm magic",
            line: 1,
            detail: magic.to_string(),
        });
    }
    let dims_line = lines.next().unwrap_or_default();
    let mut parts = dims_line.split_whitespace();
    let parse = |s: Option<&str>| -> Result<usize> {
        s.and_then(|x| x.parse().ok()).ok_or(StoreError::Malformed {
            what: "pgm dimensions",
            line: 2,
            detail: dims_line.to_string(),
        })
    };
    let w = parse(parts.next())?;
    let h = parse(parts.next())?;
    let pixels = bytes[header_end..].to_vec();
    if pixels.len() != w * h {
        return Err(StoreError::Truncated {
            expected: w * h,
            found: pixels.len(),
            offset: header_end,
        });
    }
    Ok((h, w, pixels))
}
