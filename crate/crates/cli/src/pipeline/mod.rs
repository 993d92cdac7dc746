//! Stage orchestration. `run_all` executes the whole pipeline in memory;
//! the per-stage entry points load their prerequisites from a previous
//! stage's artifacts so the binary can resume mid-run.

pub mod data;
pub mod eval;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use phasecast::metrics::MetricsReport;
use phasecast::phantom::generate_pretrain_corpus;
use phasecast::seqmodel::LMParams;
use phasecast::store::Checkpoint;
use phasecast::store::config::RunConfig;
use phasecast::store::write_metrics_csv;
use phasecast::store::write_pgm_heatmap;
use phasecast::tokenizer::{codebook_usage, reconstruction_mse, TokenizerParams};

use crate::manifest::{
    collect_artifacts, write_manifest, DataSummary, LmStageSummary, RunManifest, TokenizerSummary,
    MANIFEST_FORMAT,
};
use data::{derive_seed, encode_case, encode_corpus, generate_cases, tokenizer_pool, CaseCodes,
    CaseSet};
use train::{encode_aux, finetune, pretrain};

/// How many held-out cases get archived as 4D volumes.
const ARCHIVE_CASES: usize = 2;
const MANIFEST_NAME: &str = "manifest.json";

/// Fixed artifact layout under one output directory.
pub struct RunPaths {
    out: PathBuf,
}

impl RunPaths {
    pub fn new(out: &Path) -> Self {
        RunPaths { out: out.into() }
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn config_echo(&self) -> PathBuf {
        self.out.join("config.toml")
    }

    pub fn phantom_dir(&self) -> PathBuf {
        self.out.join("phantom")
    }

    pub fn case_volumes(&self, id: usize) -> PathBuf {
        self.phantom_dir().join(format!("case_{id:03}.v4dc"))
    }

    pub fn case_labels(&self, id: usize) -> PathBuf {
        self.phantom_dir().join(format!("case_{id:03}_labels.v4dc"))
    }

    pub fn tokenizer(&self) -> PathBuf {
        self.out.join("tokenizer.pckp")
    }

    pub fn tokenizer_summary(&self) -> PathBuf {
        self.out.join("tokenizer_summary.json")
    }

    pub fn lm_pretrained(&self) -> PathBuf {
        self.out.join("lm_pretrained.pckp")
    }

    pub fn pretrain_summary(&self) -> PathBuf {
        self.out.join("pretrain_summary.json")
    }

    pub fn lm_finetuned(&self) -> PathBuf {
        self.out.join("lm_finetuned.pckp")
    }

    pub fn finetune_summary(&self) -> PathBuf {
        self.out.join("finetune_summary.json")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.out.join("metrics.csv")
    }

    pub fn repairs_csv(&self) -> PathBuf {
        self.out.join("repairs.csv")
    }

    pub fn heatmap_dir(&self) -> PathBuf {
        self.out.join("heatmaps")
    }

    pub fn manifest(&self) -> PathBuf {
        self.out.join(MANIFEST_NAME)
    }
}

#[derive(Debug, Clone, Default)]
pub struct StageTimings {
    pub data_secs: f64,
    pub tokenizer_secs: f64,
    pub pretrain_secs: f64,
    pub finetune_secs: f64,
    pub eval_secs: f64,
}

impl StageTimings {
    pub fn total_secs(&self) -> f64 {
        self.data_secs + self.tokenizer_secs + self.pretrain_secs + self.finetune_secs
            + self.eval_secs
    }
}

pub struct RunOutcome {
    pub manifest: RunManifest,
    pub report: MetricsReport,
    pub timings: StageTimings,
}

fn check_runnable(cfg: &RunConfig) -> Result<()> {
    cfg.validate().context("config")?;
    if cfg.eval.train_cases == 0 || cfg.eval.test_cases == 0 {
        bail!("need at least one training and one test case");
    }
    if cfg.eval.paired_examples == 0 {
        bail!("need at least one in-context example");
    }
    Ok(())
}

/// Echo the resolved config with `out_dir` normalized so repeat runs in
/// different directories stay byte-identical.
fn normalized(cfg: &RunConfig) -> RunConfig {
    let mut echo = cfg.clone();
    echo.out_dir = PathBuf::from("out");
    echo
}

fn write_config_echo(cfg: &RunConfig, paths: &RunPaths) -> Result<()> {
    fs::create_dir_all(paths.out_dir())?;
    fs::write(paths.config_echo(), normalized(cfg).to_toml())
        .with_context(|| format!("write {}", paths.config_echo().display()))?;
    Ok(())
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn prepare_data(cfg: &RunConfig) -> Result<(CaseSet, Vec<phasecast::phantom::ShapeSequence>)>
{
    let cases = generate_cases(cfg)?;
    let corpus = generate_pretrain_corpus(&cfg.corpus, derive_seed(cfg.seed, "corpus", &[]))?;
    Ok((cases, corpus))
}

fn archive_cases(cases: &CaseSet, paths: &RunPaths) -> Result<()> {
    fs::create_dir_all(paths.phantom_dir())?;
    for case in cases.test.iter().take(ARCHIVE_CASES) {
        data::write_case_archive(case, &paths.case_volumes(case.id), &paths.case_labels(case.id))?;
    }
    Ok(())
}

fn train_tokenizer_stage(
    cfg: &RunConfig,
    cases: &CaseSet,
    corpus: &[phasecast::phantom::ShapeSequence],
) -> Result<(TokenizerParams, TokenizerSummary)> {
    let pool = tokenizer_pool(cfg, cases, corpus)?;
    let mut params = TokenizerParams::init(
        cfg.tokenizer.clone(),
        derive_seed(cfg.seed, "tokenizer_init", &[]),
    )?;
    let mut opts = cfg.tokenizer_train.clone();
    opts.seed = derive_seed(cfg.seed, "tokenizer", &[cfg.tokenizer_train.seed]);
    let report = phasecast::tokenizer::train(&mut params, &pool.train, &opts)?;
    let heldout_mse = reconstruction_mse(&params, &pool.heldout)?;
    // Usage sweep over a bounded, deterministic pool subsample.
    let stride = (pool.train.len() / 256).max(1);
    let sample: Vec<_> = pool.train.iter().step_by(stride).cloned().collect();
    let usage = codebook_usage(&params, &sample)?;
    let summary = TokenizerSummary {
        steps: report.steps,
        train_images: pool.train.len(),
        heldout_images: pool.heldout.len(),
        first_loss: report.first_loss,
        final_loss: report.final_loss,
        heldout_mse,
        codebook_usage: usage,
        reinit_events: report.reinit_events,
    };
    println!(
        "  tokenizer: heldout mse {heldout_mse:.5}, usage {:.1}%",
        usage * 100.0
    );
    Ok((params, summary))
}

fn encode_train_cases(tok: &TokenizerParams, cases: &CaseSet) -> Result<Vec<CaseCodes>> {
    cases
        .train
        .iter()
        .map(|c| encode_case(tok, c, &cases.rows))
        .collect()
}

fn write_repairs(repairs: &[eval::RepairRow], path: &Path) -> Result<()> {
    let mut text = String::from("arm,case,row,phase,slot,offending,replacement\n");
    for r in repairs {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.arm, r.case_id, r.row, r.event.phase, r.event.slot, r.event.offending,
            r.event.replacement
        ));
    }
    fs::write(path, text).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

fn write_eval_outputs(outputs: &eval::EvalOutputs, paths: &RunPaths) -> Result<()> {
    write_metrics_csv(&outputs.report, &paths.metrics_csv())?;
    write_repairs(&outputs.repairs, &paths.repairs_csv())?;
    fs::create_dir_all(paths.heatmap_dir())?;
    for (name, diff) in &outputs.heatmaps {
        write_pgm_heatmap(diff, 1.0, &paths.heatmap_dir().join(name))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn assemble_manifest(
    cfg: &RunConfig,
    cases: &CaseSet,
    corpus_len: usize,
    tok_summary: TokenizerSummary,
    pre_summary: LmStageSummary,
    fin_summary: LmStageSummary,
    outputs: &eval::EvalOutputs,
    paths: &RunPaths,
) -> Result<RunManifest> {
    let mut manifest = RunManifest {
        format: MANIFEST_FORMAT.to_string(),
        seed: cfg.seed,
        config: normalized(cfg),
        data: DataSummary {
            train_cases: cases.train.len(),
            test_cases: cases.test.len(),
            eval_rows: cases.rows.clone(),
            corpus_sequences: corpus_len,
        },
        tokenizer: tok_summary,
        pretrain: pre_summary,
        finetune: fin_summary,
        eval: outputs.summary.clone(),
        artifacts: Vec::new(),
    };
    manifest.artifacts = collect_artifacts(paths.out_dir(), MANIFEST_NAME)?;
    write_manifest(&manifest, &paths.manifest())?;
    Ok(manifest)
}

/// Full pipeline in one process, all stages chained in memory.
pub fn run_all(cfg: &RunConfig) -> Result<RunOutcome> {
    check_runnable(cfg)?;
    let paths = RunPaths::new(&cfg.out_dir);
    let mut timings = StageTimings::default();

    println!("[data] generating phantom cases and pretraining corpus");
    let t0 = Instant::now();
    write_config_echo(cfg, &paths)?;
    let (cases, corpus) = prepare_data(cfg)?;
    archive_cases(&cases, &paths)?;
    timings.data_secs = t0.elapsed().as_secs_f64();

    println!("[tokenizer] training on mixed slice pool");
    let t0 = Instant::now();
    let (tok, tok_summary) = train_tokenizer_stage(cfg, &cases, &corpus)?;
    tok.to_checkpoint().write(&paths.tokenizer())?;
    write_json(&tok_summary, &paths.tokenizer_summary())?;
    timings.tokenizer_secs = t0.elapsed().as_secs_f64();

    println!("[pretrain] shape-corpus pretraining");
    let t0 = Instant::now();
    let corpus_codes = encode_corpus(&tok, &corpus)?;
    let (pre, pre_summary) = pretrain(cfg, &corpus_codes)?;
    pre.to_checkpoint().write(&paths.lm_pretrained())?;
    write_json(&pre_summary, &paths.pretrain_summary())?;
    timings.pretrain_secs = t0.elapsed().as_secs_f64();

    println!("[finetune] phantom fine-tuning");
    let t0 = Instant::now();
    let train_codes = encode_train_cases(&tok, &cases)?;
    let aux = encode_aux(cfg, &tok, &cases)?;
    let (fin, fin_summary) = finetune(cfg, &pre, &train_codes, &aux)?;
    fin.to_checkpoint().write(&paths.lm_finetuned())?;
    write_json(&fin_summary, &paths.finetune_summary())?;
    timings.finetune_secs = t0.elapsed().as_secs_f64();

    println!("[eval] held-out evaluation");
    let t0 = Instant::now();
    let untrained = LMParams::init(cfg.lm.clone(), derive_seed(cfg.seed, "untrained", &[]))?;
    let outputs = eval::evaluate(cfg, &tok, &fin, &pre, &untrained, &cases, &train_codes, &aux)?;
    write_eval_outputs(&outputs, &paths)?;
    let manifest = assemble_manifest(
        cfg,
        &cases,
        corpus.len(),
        tok_summary,
        pre_summary,
        fin_summary,
        &outputs,
        &paths,
    )?;
    timings.eval_secs = t0.elapsed().as_secs_f64();

    println!(
        "[done] lung dsc ct_mask {:.3}, persistence {:.3} ({:.0}s total)",
        manifest.eval.motion["ct_mask"].mean_lung_dsc,
        manifest.eval.motion["persistence"].mean_lung_dsc,
        timings.total_secs()
    );
    Ok(RunOutcome {
        manifest,
        report: outputs.report,
        timings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Phantom,
    Tokenizer,
    Pretrain,
    Finetune,
    Eval,
}

fn load_tokenizer(cfg: &RunConfig, paths: &RunPaths) -> Result<TokenizerParams> {
    let ckpt = Checkpoint::read(&paths.tokenizer())?;
    Ok(TokenizerParams::from_checkpoint(cfg.tokenizer.clone(), &ckpt)?)
}

fn load_lm(cfg: &RunConfig, path: &Path) -> Result<LMParams<f32>> {
    let ckpt = Checkpoint::read(path)?;
    Ok(LMParams::from_checkpoint(cfg.lm.clone(), &ckpt)?)
}

/// Run one stage, reading prerequisites produced by earlier stages from
/// the output directory.
pub fn run_stage(cfg: &RunConfig, stage: Stage) -> Result<()> {
    check_runnable(cfg)?;
    let paths = RunPaths::new(&cfg.out_dir);
    fs::create_dir_all(paths.out_dir())?;
    match stage {
        Stage::Phantom => {
            write_config_echo(cfg, &paths)?;
            let (cases, _) = prepare_data(cfg)?;
            archive_cases(&cases, &paths)?;
            println!(
                "phantom: {} train / {} test cases, band rows {:?}",
                cases.train.len(),
                cases.test.len(),
                cases.rows
            );
        }
        Stage::Tokenizer => {
            let (cases, corpus) = prepare_data(cfg)?;
            let (tok, summary) = train_tokenizer_stage(cfg, &cases, &corpus)?;
            tok.to_checkpoint().write(&paths.tokenizer())?;
            write_json(&summary, &paths.tokenizer_summary())?;
        }
        Stage::Pretrain => {
            let tok = load_tokenizer(cfg, &paths)?;
            let corpus =
                generate_pretrain_corpus(&cfg.corpus, derive_seed(cfg.seed, "corpus", &[]))?;
            let corpus_codes = encode_corpus(&tok, &corpus)?;
            let (pre, summary) = pretrain(cfg, &corpus_codes)?;
            pre.to_checkpoint().write(&paths.lm_pretrained())?;
            write_json(&summary, &paths.pretrain_summary())?;
        }
        Stage::Finetune => {
            let tok = load_tokenizer(cfg, &paths)?;
            let pre = load_lm(cfg, &paths.lm_pretrained())?;
            let cases = generate_cases(cfg)?;
            let train_codes = encode_train_cases(&tok, &cases)?;
            let aux = encode_aux(cfg, &tok, &cases)?;
            let (fin, summary) = finetune(cfg, &pre, &train_codes, &aux)?;
            fin.to_checkpoint().write(&paths.lm_finetuned())?;
            write_json(&summary, &paths.finetune_summary())?;
        }
        Stage::Eval => {
            let tok = load_tokenizer(cfg, &paths)?;
            let pre = load_lm(cfg, &paths.lm_pretrained())?;
            let fin = load_lm(cfg, &paths.lm_finetuned())?;
            let cases = generate_cases(cfg)?;
            let corpus =
                generate_pretrain_corpus(&cfg.corpus, derive_seed(cfg.seed, "corpus", &[]))?;
            let train_codes = encode_train_cases(&tok, &cases)?;
            let aux = encode_aux(cfg, &tok, &cases)?;
            let untrained =
                LMParams::init(cfg.lm.clone(), derive_seed(cfg.seed, "untrained", &[]))?;
            let outputs =
                eval::evaluate(cfg, &tok, &fin, &pre, &untrained, &cases, &train_codes, &aux)?;
            write_eval_outputs(&outputs, &paths)?;
            let tok_summary = read_json(&paths.tokenizer_summary())?;
            let pre_summary = read_json(&paths.pretrain_summary())?;
            let fin_summary = read_json(&paths.finetune_summary())?;
            assemble_manifest(
                cfg,
                &cases,
                corpus.len(),
                tok_summary,
                pre_summary,
                fin_summary,
                &outputs,
                &paths,
            )?;
        }
    }
    Ok(())
}
