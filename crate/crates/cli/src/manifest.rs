//! Run manifest: a JSON record of the resolved config, per-stage training
//! summaries, evaluation aggregates, and a hash inventory of every file the
//! run produced.
//!
//! The manifest must be byte-identical across repeat runs of the same
//! config and seed, so it carries no timestamps, durations, or absolute
//! paths; artifact paths are relative to the manifest's own directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use phasecast::store::config::RunConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FORMAT: &str = "phasecast-run/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub seed: u64,
    /// Resolved config with `out_dir` normalized to the literal `out` so
    /// the manifest does not depend on where the run was placed.
    pub config: RunConfig,
    pub data: DataSummary,
    pub tokenizer: TokenizerSummary,
    pub pretrain: LmStageSummary,
    pub finetune: LmStageSummary,
    pub eval: EvalSummary,
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSummary {
    pub train_cases: usize,
    pub test_cases: usize,
    /// Contiguous coronal band the evaluation slices come from.
    pub eval_rows: Vec<usize>,
    pub corpus_sequences: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizerSummary {
    pub steps: usize,
    pub train_images: usize,
    pub heldout_images: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub heldout_mse: f64,
    /// Fraction of the codebook exercised by a held-out encode sweep.
    pub codebook_usage: f64,
    pub reinit_events: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmStageSummary {
    pub steps: usize,
    pub sentences: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    /// Mean loss over the last ten optimizer steps.
    pub tail_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub context_phases: usize,
    pub horizon_phases: Vec<usize>,
    /// Keyed by arm name: ct_mask, ct_only, zeroshot, untrained,
    /// persistence.
    pub motion: BTreeMap<String, MotionArmSummary>,
    pub auxiliary: AuxSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionArmSummary {
    /// Mean over test cases of the per-case horizon-mean lung DSC.
    pub mean_lung_dsc: f64,
    /// Horizon-mean lung DSC per test case, in case order.
    pub per_case_lung_dsc: Vec<f64>,
    /// Mean lung DSC per horizon phase, in `horizon_phases` order.
    pub per_phase_lung_dsc: Vec<f64>,
    /// Mean DSC across all organs, cases, and horizon phases.
    pub mean_all_organ_dsc: f64,
    pub repair_events: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuxSummary {
    /// Mean segmentation DSC across test cases and organs.
    pub seg_mean_dsc: f64,
    pub denoise_mean_psnr_noisy: f64,
    pub denoise_mean_psnr_out: f64,
    pub sr_mean_psnr_nearest: f64,
    pub sr_mean_psnr_out: f64,
    pub repair_events: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// `/`-separated path relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("read {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Hash every file under `out_dir` except the manifest itself, sorted by
/// relative path so the record order is reproducible.
pub fn collect_artifacts(out_dir: &Path, manifest_name: &str) -> Result<Vec<ArtifactRecord>> {
    let mut files = Vec::new();
    walk(out_dir, &mut files)?;
    let mut records = Vec::new();
    for file in files {
        let rel = file
            .strip_prefix(out_dir)
            .expect("walked file outside out_dir");
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if rel == manifest_name {
            continue;
        }
        let bytes = fs::metadata(&file)?.len();
        records.push(ArtifactRecord {
            path: rel,
            bytes,
            sha256: sha256_file(&file)?,
        });
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(records)
}

fn walk(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("read dir {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

pub fn write_manifest(manifest: &RunManifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
