//! Aggregated run configuration.
//!
//! One TOML file drives the whole pipeline. Every section has full
//! defaults, unknown keys are rejected, and cross-section invariants
//! (slice extents vs tokenizer extents, vocabulary vs codebook, sentence
//! length vs context) are validated with the offending key path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{io_err, StoreError};
use crate::phantom::{CorpusConfig, PhantomConfig};
use crate::seqmodel::{LMConfig, SpecialTokens};
use crate::tokenizer::{TokenizerConfig, TrainOpts};

#[derive(Debug, Error)]
#[error("config key `{key}`: {detail}")]
pub struct ConfigError {
    pub key: String,
    pub detail: String,
}

fn bad(key: &str, detail: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.into(),
        detail: detail.into(),
    }
}

/// Optimization schedule for the two language-model phases.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub finetune_steps: usize,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Observed phases in fine-tuning sentences (the rest are targets).
    pub context_phases_train: usize,
    /// Observed phases when evaluating motion prediction.
    pub context_phases_eval: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            pretrain_steps: 600,
            pretrain_batch: 2,
            pretrain_lr: 5e-4,
            finetune_steps: 1500,
            finetune_batch: 2,
            finetune_lr: 3e-4,
            clip_norm: 1.0,
            context_phases_train: 1,
            context_phases_eval: 5,
        }
    }
}

/// Evaluation protocol: case splits, slice band, and task degradations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Case seeds `0..train_cases` are the training split.
    pub train_cases: usize,
    /// Case seeds `train_cases..train_cases+test_cases` are held out.
    pub test_cases: usize,
    /// Coronal rows evaluated: organ-center rows widened by this margin.
    pub band_margin: usize,
    /// Denoising task noise level.
    pub noise_sigma: f64,
    /// Super-resolution block factor.
    pub sr_factor: usize,
    /// In-context example pairs per task prompt.
    pub paired_examples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            train_cases: 80,
            test_cases: 20,
            band_margin: 1,
            noise_sigma: 0.1,
            sr_factor: 4,
            paired_examples: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; stage seeds derive from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub phantom: PhantomConfig,
    pub corpus: CorpusConfig,
    pub tokenizer: TokenizerConfig,
    pub tokenizer_train: TrainOpts,
    pub lm: LMConfig,
    pub schedule: ScheduleConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            phantom: PhantomConfig::default(),
            corpus: CorpusConfig::default(),
            tokenizer: TokenizerConfig::default(),
            tokenizer_train: TrainOpts::default(),
            lm: LMConfig::default(),
            schedule: ScheduleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn specials(&self) -> SpecialTokens {
        SpecialTokens::for_codebook(self.tokenizer.codebook_size)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.phantom
            .validate()
            .map_err(|e| bad("phantom", e.to_string()))?;
        self.tokenizer
            .validate()
            .map_err(|e| bad("tokenizer", e.to_string()))?;
        self.lm.validate().map_err(|e| bad("lm", e.to_string()))?;

        // Sentences carry coronal slices: (Z, X) planes.
        let (nz, nx) = (self.phantom.dims[0], self.phantom.dims[2]);
        if self.tokenizer.height != nz || self.tokenizer.width != nx {
            return Err(bad(
                "tokenizer.height/width",
                format!(
                    "must match coronal slice extents {}x{}, got {}x{}",
                    nz, nx, self.tokenizer.height, self.tokenizer.width
                ),
            ));
        }
        if self.corpus.height != self.tokenizer.height
            || self.corpus.width != self.tokenizer.width
        {
            return Err(bad(
                "corpus.height/width",
                format!(
                    "must match tokenizer extents {}x{}, got {}x{}",
                    self.tokenizer.height, self.tokenizer.width, self.corpus.height,
                    self.corpus.width
                ),
            ));
        }
        let vocab = SpecialTokens::vocab_size(self.tokenizer.codebook_size);
        if self.lm.vocab_size != vocab {
            return Err(bad(
                "lm.vocab_size",
                format!(
                    "must be codebook_size + 4 = {vocab}, got {}",
                    self.lm.vocab_size
                ),
            ));
        }

        let g = self.tokenizer.grid_tokens();
        let t = self.phantom.num_phases;
        let mask_sentence = 1 + t * (2 * g + 2);
        if mask_sentence > self.lm.context_len {
            return Err(bad(
                "lm.context_len",
                format!(
                    "image+mask sentence needs {mask_sentence} tokens, context is {}",
                    self.lm.context_len
                ),
            ));
        }
        let prompt = 1 + self.eval.paired_examples * (2 * g + 2) + g + 1 + g;
        if prompt > self.lm.context_len {
            return Err(bad(
                "lm.context_len",
                format!(
                    "paired prompt plus completion needs {prompt} tokens, context is {}",
                    self.lm.context_len
                ),
            ));
        }
        if self.corpus.frames_per_sequence < t {
            return Err(bad(
                "corpus.frames_per_sequence",
                format!("must cover {t} phases, got {}", self.corpus.frames_per_sequence),
            ));
        }

        for (key, l) in [
            ("schedule.context_phases_train", self.schedule.context_phases_train),
            ("schedule.context_phases_eval", self.schedule.context_phases_eval),
        ] {
            if l >= t {
                return Err(bad(
                    key,
                    format!("must leave at least one future phase of {t}"),
                ));
            }
        }
        if self.schedule.pretrain_batch == 0 || self.schedule.finetune_batch == 0 {
            return Err(bad("schedule", "batch sizes must be positive"));
        }
        if self.schedule.clip_norm < 0.0 {
            return Err(bad("schedule.clip_norm", "must be >= 0"));
        }

        if self.eval.test_cases == 0 || self.eval.train_cases == 0 {
            return Err(bad("eval", "both case splits must be non-empty"));
        }
        if self.eval.noise_sigma < 0.0 {
            return Err(bad("eval.noise_sigma", "must be >= 0"));
        }
        if self.eval.sr_factor < 2
            || self.tokenizer.height % self.eval.sr_factor != 0
            || self.tokenizer.width % self.eval.sr_factor != 0
        {
            return Err(bad(
                "eval.sr_factor",
                format!(
                    "must be >= 2 and divide slice extents {}x{}",
                    self.tokenizer.height, self.tokenizer.width
                ),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Read and validate a TOML run configuration.
pub fn load_config(path: &Path) -> Result<RunConfig, StoreError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let cfg: RunConfig = toml::from_str(&text).map_err(|e| StoreError::Config {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    cfg.validate().map_err(|e| StoreError::Config {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(cfg)
}
