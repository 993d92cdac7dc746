//! Run orchestration for the `phasecast` binary: phantom data generation,
//! tokenizer and language-model training, evaluation against analytic
//! ground truth, and report artifacts under a single output directory.
//!
//! Everything here is strictly single-threaded and deterministic: two runs
//! with the same config and seed write byte-identical metrics CSVs,
//! manifests, and heatmap PGMs.

pub mod manifest;
pub mod pipeline;

pub use manifest::RunManifest;
pub use pipeline::{run_all, RunOutcome, RunPaths};
