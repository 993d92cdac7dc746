//! Language-model training stages: layout-mixed pretraining on the shape
//! corpus, then fine-tuning on phantom cases with auxiliary prompted
//! tasks folded into the mix.

use anyhow::{Context, Result};
use phasecast::numcore::optim::Adam;
use phasecast::phantom::{add_gaussian_noise, block_downsample, nearest_upsample};
use phasecast::seqmodel::{lm_train_step, LMParams, SpecialTokens};
use phasecast::store::config::RunConfig;
use phasecast::tasks::{build_motion_sentence, build_paired_sentence, VisualSentence};
use phasecast::tasks::volume_slice;
use phasecast::tokenizer::{encode, TokenizerParams};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::data::{derive_seed, CaseCodes, CaseSet, SeqCodes};
use crate::manifest::LmStageSummary;

#[derive(Clone, Copy, Debug)]
enum Layout {
    CtMask,
    CtOnly,
    Seg,
    Denoise,
    Sr,
}

/// Pretraining sees only the shape corpus; the paired layout there maps
/// frames to their mask renders.
const PRETRAIN_MIX: [Layout; 3] = [Layout::CtMask, Layout::CtOnly, Layout::Seg];

/// Fine-tuning leans on the masked motion layout (it carries the
/// benchmark) while keeping the other layouts warm.
const FINETUNE_MIX: [Layout; 8] = [
    Layout::CtMask,
    Layout::CtOnly,
    Layout::Seg,
    Layout::CtMask,
    Layout::Denoise,
    Layout::CtMask,
    Layout::Sr,
    Layout::CtOnly,
];

struct LossTrack {
    first: f64,
    last: f64,
    tail: Vec<f64>,
    count: usize,
}

impl LossTrack {
    fn new() -> Self {
        LossTrack {
            first: f64::NAN,
            last: f64::NAN,
            tail: Vec::new(),
            count: 0,
        }
    }

    fn push(&mut self, loss: f64) {
        if self.count == 0 {
            self.first = loss;
        }
        self.last = loss;
        self.tail.push(loss);
        if self.tail.len() > 10 {
            self.tail.remove(0);
        }
        self.count += 1;
    }

    fn summary(&self, sentences: usize) -> LmStageSummary {
        let tail = if self.tail.is_empty() {
            f64::NAN
        } else {
            self.tail.iter().sum::<f64>() / self.tail.len() as f64
        };
        LmStageSummary {
            steps: self.count,
            sentences,
            first_loss: self.first,
            final_loss: self.last,
            tail_loss: tail,
        }
    }
}

fn run_schedule(
    params: &mut LMParams<f32>,
    opt: &mut Adam<f32>,
    specials: &SpecialTokens,
    steps: usize,
    batch_size: usize,
    stage: &str,
    mut sample: impl FnMut(usize) -> Result<VisualSentence>,
) -> Result<LmStageSummary> {
    let mut track = LossTrack::new();
    let mut sentences = 0usize;
    for step in 0..steps {
        let mut owned: Vec<(Vec<usize>, Vec<usize>)> = Vec::with_capacity(batch_size);
        for i in 0..batch_size {
            let sentence = sample(step * batch_size + i)?;
            owned.push(sentence.training_pair(specials.pad));
        }
        sentences += owned.len();
        let batch: Vec<(&[usize], &[usize])> = owned
            .iter()
            .map(|(x, y)| (x.as_slice(), y.as_slice()))
            .collect();
        let (loss, _norm) = lm_train_step(params, opt, &batch, specials.pad)?;
        track.push(loss);
        if step == 0 || (step + 1) % 25 == 0 || step + 1 == steps {
            println!("  {stage} step {:>4}/{steps}  loss {loss:.4}", step + 1);
        }
    }
    Ok(track.summary(sentences))
}

pub fn pretrain(
    cfg: &RunConfig,
    corpus_codes: &[SeqCodes],
) -> Result<(LMParams<f32>, LmStageSummary)> {
    let specials = cfg.specials();
    let mut params = LMParams::init(cfg.lm.clone(), derive_seed(cfg.seed, "lm_init", &[]))?;
    let mut opt = Adam::new(cfg.schedule.pretrain_lr).with_clip(cfg.schedule.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pretrain", &[]));
    let pairs_per_sentence = cfg.eval.paired_examples + 1;
    let context = cfg.schedule.context_phases_train;
    let summary = run_schedule(
        &mut params,
        &mut opt,
        &specials,
        cfg.schedule.pretrain_steps,
        cfg.schedule.pretrain_batch,
        "pretrain",
        |draw| {
            let seq = &corpus_codes[rng.gen_range(0..corpus_codes.len())];
            let sentence = match PRETRAIN_MIX[draw % PRETRAIN_MIX.len()] {
                Layout::CtMask => {
                    build_motion_sentence(&seq.img, Some(&seq.mask), &specials, context)?
                }
                Layout::CtOnly => build_motion_sentence(&seq.img, None, &specials, context)?,
                _ => {
                    let steps = seq.img.len();
                    let mut pairs = Vec::with_capacity(pairs_per_sentence);
                    for _ in 0..pairs_per_sentence {
                        let t = rng.gen_range(0..steps);
                        pairs.push((seq.img[t].clone(), seq.mask[t].clone()));
                    }
                    build_paired_sentence(&pairs, &specials, 0)?
                }
            };
            Ok(sentence)
        },
    )
    .context("pretraining")?;
    Ok((params, summary))
}

/// Degraded-input token codes for the auxiliary tasks, phase 0 only:
/// `noisy[case][row]` and `lowres[case][row]`.
pub struct AuxCodes {
    pub noisy: Vec<Vec<Vec<usize>>>,
    pub lowres: Vec<Vec<Vec<usize>>>,
}

pub fn encode_aux(
    cfg: &RunConfig,
    tok: &TokenizerParams,
    cases: &CaseSet,
) -> Result<AuxCodes> {
    let mut noisy = Vec::with_capacity(cases.train.len());
    let mut lowres = Vec::with_capacity(cases.train.len());
    for case in &cases.train {
        let mut nr = Vec::with_capacity(cases.rows.len());
        let mut lr = Vec::with_capacity(cases.rows.len());
        for &row in &cases.rows {
            let clean = volume_slice(&case.seq.volumes[0], row);
            let seed = derive_seed(cfg.seed, "aux_noise", &[case.id as u64, row as u64]);
            let noised = add_gaussian_noise(&clean, cfg.eval.noise_sigma, seed);
            nr.push(encode(tok, &noised)?);
            let down = block_downsample(&clean, cfg.eval.sr_factor)?;
            lr.push(encode(tok, &nearest_upsample(&down, cfg.eval.sr_factor)?)?);
        }
        noisy.push(nr);
        lowres.push(lr);
    }
    Ok(AuxCodes { noisy, lowres })
}

pub fn finetune(
    cfg: &RunConfig,
    pretrained: &LMParams<f32>,
    train_codes: &[CaseCodes],
    aux: &AuxCodes,
) -> Result<(LMParams<f32>, LmStageSummary)> {
    let specials = cfg.specials();
    let mut params = pretrained.clone();
    let mut opt = Adam::new(cfg.schedule.finetune_lr).with_clip(cfg.schedule.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "finetune", &[]));
    let pairs_per_sentence = cfg.eval.paired_examples + 1;
    let context = cfg.schedule.context_phases_train;
    let num_rows = train_codes[0].img.len();
    let num_phases = train_codes[0].img[0].len();
    let summary = run_schedule(
        &mut params,
        &mut opt,
        &specials,
        cfg.schedule.finetune_steps,
        cfg.schedule.finetune_batch,
        "finetune",
        |draw| {
            let layout = FINETUNE_MIX[draw % FINETUNE_MIX.len()];
            let case = rng.gen_range(0..train_codes.len());
            let row = rng.gen_range(0..num_rows);
            let codes = &train_codes[case];
            let sentence = match layout {
                Layout::CtMask => build_motion_sentence(
                    &codes.img[row],
                    Some(&codes.mask[row]),
                    &specials,
                    context,
                )?,
                Layout::CtOnly => {
                    build_motion_sentence(&codes.img[row], None, &specials, context)?
                }
                Layout::Seg => {
                    let mut pairs = Vec::with_capacity(pairs_per_sentence);
                    for _ in 0..pairs_per_sentence {
                        let c = rng.gen_range(0..train_codes.len());
                        let r = rng.gen_range(0..num_rows);
                        let p = rng.gen_range(0..num_phases);
                        pairs.push((
                            train_codes[c].img[r][p].clone(),
                            train_codes[c].mask[r][p].clone(),
                        ));
                    }
                    build_paired_sentence(&pairs, &specials, 0)?
                }
                Layout::Denoise | Layout::Sr => {
                    let source = if matches!(layout, Layout::Denoise) {
                        &aux.noisy
                    } else {
                        &aux.lowres
                    };
                    let mut pairs = Vec::with_capacity(pairs_per_sentence);
                    for _ in 0..pairs_per_sentence {
                        let c = rng.gen_range(0..train_codes.len());
                        let r = rng.gen_range(0..num_rows);
                        pairs.push((source[c][r].clone(), train_codes[c].img[r][0].clone()));
                    }
                    build_paired_sentence(&pairs, &specials, 0)?
                }
            };
            Ok(sentence)
        },
    )
    .context("fine-tuning")?;
    Ok((params, summary))
}
