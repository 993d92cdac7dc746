//! Bit-exact persistence: V4DC volumes, PCKP checkpoints, metrics CSV,
//! PGM heatmaps, and the run configuration schema.

mod checkpoint;
pub mod config;
mod csv;
mod pgm;
mod v4dc;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use csv::{format_sig6, read_metrics_csv, write_metrics_csv};
pub use pgm::{read_pgm, write_pgm_heatmap};
pub use v4dc::{read_v4dc, write_v4dc, V4dcData, V4dcDtype, V4dcHeader};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at byte 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} at byte {offset} (expected {expected})")]
    BadVersion {
        expected: u16,
        found: u16,
        offset: usize,
    },
    #[error("unknown dtype code {found} at byte {offset}")]
    BadDtype { found: u8, offset: usize },
    #[error("truncated file: needed {expected} bytes at byte {offset}, found {found}")]
    Truncated {
        expected: usize,
        found: usize,
        offset: usize,
    },
    #[error("payload length {got} does not match header ({expected} elements)")]
    PayloadMismatch { expected: usize, got: usize },
    #[error("malformed {what} at line {line}: {detail}")]
    Malformed {
        what: &'static str,
        line: usize,
        detail: String,
    },
    #[error("config error at `{path}`: {detail}")]
    Config { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &std::path::Path, source: std::io::Error) -> StoreError {
    StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}
