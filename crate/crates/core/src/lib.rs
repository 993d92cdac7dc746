//! Desk-scale autoregressive visual-sequence modeling for 4D volumetric
//! imaging, benchmarked on a procedural breathing phantom.
//!
//! The pipeline tokenizes image phases into discrete codes, models token
//! sequences with a causal transformer, and performs motion prediction,
//! segmentation, denoising, and super-resolution by visual-sentence
//! prompting. Everything runs on CPU and is bit-deterministic per seed in
//! single-worker mode.
//!
//! Module map:
//! - [`numcore`]: dense tensors with reverse-mode autodiff and gradient
//!   verification
//! - [`phantom`]: procedural 4D breathing phantom with analytic masks, task
//!   degradations, and a non-medical pretraining corpus
//! - [`store`]: bit-exact persistence (volumes, checkpoints, CSV, PGM,
//!   configs)
//! - [`tokenizer`]: vector-quantized image tokenizer
//! - [`seqmodel`]: causal decoder-only transformer with rotary embeddings
//! - [`tasks`]: visual-sentence assembly, autoregressive rollouts, prompting,
//!   baselines
//! - [`metrics`]: overlap/boundary/image-quality metrics with brute-force
//!   oracles

pub mod grid;
pub mod metrics;
pub mod numcore;
pub mod phantom;
pub mod seqmodel;
pub mod store;
pub mod tasks;
pub mod tokenizer;
