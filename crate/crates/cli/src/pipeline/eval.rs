//! Held-out evaluation. Motion forecasting runs four prompt arms over the
//! same test cases — fine-tuned masked (`ct_mask`), fine-tuned image-only
//! (`ct_only`), corpus-pretrained zero-shot (`zeroshot`), and an
//! untrained-weights control — against a persistence baseline. Prompted
//! segmentation, denoising, and super-resolution run on the fine-tuned
//! model with in-context examples drawn from training cases.

use std::collections::BTreeMap;

use anyhow::{anyhow, Result};
use phasecast::grid::Grid3;
use phasecast::metrics::{msd_hd95, surface_distances, SurfaceOutcome};
use phasecast::metrics::{difference_heatmap, overlap_metrics, psnr, ssim, MetricsReport};
use phasecast::numcore::Tensor;
use phasecast::phantom::{add_gaussian_noise, block_downsample, nearest_upsample};
use phasecast::seqmodel::{LMParams, Sampler, SamplerState};
use phasecast::store::config::RunConfig;
use phasecast::tasks::{binarize_mask_image, classify_by_levels, intensity_classes};
use phasecast::tasks::{complete_prompt, rollout_motion, RepairEvent};
use phasecast::tasks::{build_motion_sentence, build_paired_prompt};
use phasecast::tasks::{label_slice, volume_slice};
use phasecast::tokenizer::{decode, encode, TokenizerParams};

use super::data::{derive_seed, encode_case, CaseCodes, CaseSet};
use super::train::AuxCodes;
use crate::manifest::{AuxSummary, EvalSummary, MotionArmSummary};

pub struct RepairRow {
    pub arm: &'static str,
    pub case_id: usize,
    pub row: usize,
    pub event: RepairEvent,
}

pub struct EvalOutputs {
    pub report: MetricsReport,
    pub summary: EvalSummary,
    pub repairs: Vec<RepairRow>,
    /// Named difference images destined for PGM heatmaps.
    pub heatmaps: Vec<(String, Tensor<f32>)>,
}

/// Predicted label/intensity images for one arm: indexed `[row][phase]`
/// over the horizon.
struct ArmPrediction {
    labels: Vec<Vec<Vec<u8>>>,
    images: Vec<Vec<Tensor<f32>>>,
}

struct ArmAccum {
    lung_by_case_phase: BTreeMap<(usize, usize), f64>,
    all_dsc: Vec<f64>,
    repairs: usize,
}

impl ArmAccum {
    fn new() -> Self {
        ArmAccum {
            lung_by_case_phase: BTreeMap::new(),
            all_dsc: Vec::new(),
            repairs: 0,
        }
    }

    fn summary(&self, num_cases: usize, horizon: &[usize]) -> MotionArmSummary {
        let mut per_case = Vec::with_capacity(num_cases);
        for case in 0..num_cases {
            let vals: Vec<f64> = horizon
                .iter()
                .filter_map(|&p| self.lung_by_case_phase.get(&(case, p)).copied())
                .collect();
            per_case.push(mean(&vals));
        }
        let per_phase: Vec<f64> = horizon
            .iter()
            .map(|&p| {
                let vals: Vec<f64> = (0..num_cases)
                    .filter_map(|c| self.lung_by_case_phase.get(&(c, p)).copied())
                    .collect();
                mean(&vals)
            })
            .collect();
        MotionArmSummary {
            mean_lung_dsc: mean(&per_case),
            per_case_lung_dsc: per_case,
            per_phase_lung_dsc: per_phase,
            mean_all_organ_dsc: mean(&self.all_dsc),
            repair_events: self.repairs,
        }
    }
}

fn mean(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

fn organ_slab(label_imgs: &[&[u8]], label: u8, nz: usize, nx: usize) -> Grid3<bool> {
    let mut g = Grid3::filled([nz, label_imgs.len(), nx], false);
    for (yi, img) in label_imgs.iter().enumerate() {
        for z in 0..nz {
            for x in 0..nx {
                if img[z * nx + x] == label {
                    g.set(z, yi, x, true);
                }
            }
        }
    }
    g
}

fn image_slab(imgs: &[&Tensor<f32>]) -> Tensor<f32> {
    let mut data = Vec::new();
    for img in imgs {
        data.extend_from_slice(img.data());
    }
    let n = data.len();
    Tensor::new(&[n], data).expect("flat slab")
}

fn slab_ssim(pred: &[&Tensor<f32>], gt: &[&Tensor<f32>]) -> Result<f64> {
    let mut acc = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        acc += ssim(p, g)?;
    }
    Ok(acc / pred.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn rollout_arm(
    arm: &'static str,
    params: &LMParams<f32>,
    masked: bool,
    cfg: &RunConfig,
    tok: &TokenizerParams,
    codes: &CaseCodes,
    case_id: usize,
    rows: &[usize],
    classes: &[(u8, f32)],
    max_label: u8,
    repairs: &mut Vec<RepairRow>,
) -> Result<ArmPrediction> {
    let specials = cfg.specials();
    let g = cfg.tokenizer.grid_tokens();
    let l = cfg.schedule.context_phases_eval;
    let t = cfg.phantom.num_phases;
    let mut labels = Vec::with_capacity(rows.len());
    let mut images = Vec::with_capacity(rows.len());
    for (ri, &row) in rows.iter().enumerate() {
        let masks_ctx = &codes.mask[ri][..l];
        let prompt = build_motion_sentence(
            &codes.img[ri][..l],
            masked.then_some(masks_ctx),
            &specials,
            l,
        )?;
        let mut sampler = SamplerState::new(Sampler::Greedy);
        let ro = rollout_motion(params, &specials, &prompt.tokens, g, t - l, masked, &mut sampler)?;
        for event in ro.repairs {
            repairs.push(RepairRow {
                arm,
                case_id,
                row,
                event,
            });
        }
        let mut row_labels = Vec::with_capacity(t - l);
        let mut row_images = Vec::with_capacity(t - l);
        for hp in 0..t - l {
            let img = decode(tok, &ro.image_codes[hp])?;
            let lab = if masked {
                let mask_codes = ro.mask_codes.as_ref().expect("masked rollout");
                binarize_mask_image(&decode(tok, &mask_codes[hp])?, max_label)
            } else {
                classify_by_levels(&img, classes)
            };
            row_labels.push(lab);
            row_images.push(img);
        }
        labels.push(row_labels);
        images.push(row_images);
    }
    Ok(ArmPrediction { labels, images })
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    cfg: &RunConfig,
    tok: &TokenizerParams,
    finetuned: &LMParams<f32>,
    pretrained: &LMParams<f32>,
    untrained: &LMParams<f32>,
    cases: &CaseSet,
    train_codes: &[CaseCodes],
    aux: &AuxCodes,
) -> Result<EvalOutputs> {
    let specials = cfg.specials();
    let l = cfg.schedule.context_phases_eval;
    let t = cfg.phantom.num_phases;
    let horizon: Vec<usize> = (l..t).collect();
    let organs: Vec<(String, u8)> = cfg
        .phantom
        .organs
        .iter()
        .map(|o| (o.name.clone(), o.label))
        .collect();
    let lung = organs
        .first()
        .ok_or_else(|| anyhow!("no organs configured"))?
        .0
        .clone();
    let max_label = organs.iter().map(|&(_, l)| l).max().expect("organs");
    let classes = intensity_classes(&cfg.phantom);
    let [nz, _, nx] = cfg.phantom.dims;
    let spacing = cfg.phantom.spacing_mm;
    let rows = &cases.rows;
    let mid = rows.len() / 2;

    let arms: [(&'static str, &LMParams<f32>, bool); 4] = [
        ("ct_mask", finetuned, true),
        ("ct_only", finetuned, false),
        ("zeroshot", pretrained, true),
        ("untrained", untrained, true),
    ];
    let mut accum: BTreeMap<&'static str, ArmAccum> = arms
        .iter()
        .map(|&(name, _, _)| (name, ArmAccum::new()))
        .chain(std::iter::once(("persistence", ArmAccum::new())))
        .collect();
    let mut report = MetricsReport::new();
    let mut repairs = Vec::new();
    let mut heatmaps = Vec::new();

    // In-context examples for the auxiliary tasks come from the first
    // training cases, middle band row, phase 0.
    let k = cfg.eval.paired_examples.min(train_codes.len());
    let seg_examples: Vec<(Vec<usize>, Vec<usize>)> = (0..k)
        .map(|j| {
            (
                train_codes[j].img[mid][0].clone(),
                train_codes[j].mask[mid][0].clone(),
            )
        })
        .collect();
    let den_examples: Vec<(Vec<usize>, Vec<usize>)> = (0..k)
        .map(|j| (aux.noisy[j][mid].clone(), train_codes[j].img[mid][0].clone()))
        .collect();
    let sr_examples: Vec<(Vec<usize>, Vec<usize>)> = (0..k)
        .map(|j| (aux.lowres[j][mid].clone(), train_codes[j].img[mid][0].clone()))
        .collect();

    let mut seg_dscs = Vec::new();
    let mut den_noisy = Vec::new();
    let mut den_out = Vec::new();
    let mut sr_nearest = Vec::new();
    let mut sr_out = Vec::new();
    let mut aux_repairs = 0usize;

    for (order, case) in cases.test.iter().enumerate() {
        let case_name = format!("case{:03}", case.id);
        let codes = encode_case(tok, case, rows)?;
        let gt_labels: Vec<Vec<Vec<u8>>> = rows
            .iter()
            .map(|&row| {
                (0..t)
                    .map(|p| label_slice(&case.seq.labels[p], row))
                    .collect()
            })
            .collect();
        let gt_images: Vec<Vec<Tensor<f32>>> = rows
            .iter()
            .map(|&row| {
                (0..t)
                    .map(|p| volume_slice(&case.seq.volumes[p], row))
                    .collect()
            })
            .collect();

        let mut preds: BTreeMap<&'static str, ArmPrediction> = BTreeMap::new();
        for &(name, params, masked) in &arms {
            let before = repairs.len();
            let pred = rollout_arm(
                name, params, masked, cfg, tok, &codes, case.id, rows, &classes, max_label,
                &mut repairs,
            )?;
            accum.get_mut(name).expect("arm accum").repairs += repairs.len() - before;
            preds.insert(name, pred);
        }
        // Persistence: freeze the last context phase.
        let persist = ArmPrediction {
            labels: (0..rows.len())
                .map(|ri| (0..t - l).map(|_| gt_labels[ri][l - 1].clone()).collect())
                .collect(),
            images: (0..rows.len())
                .map(|ri| (0..t - l).map(|_| gt_images[ri][l - 1].clone()).collect())
                .collect(),
        };

        for (hp, &phase) in horizon.iter().enumerate() {
            let gt_phase: Vec<&[u8]> = gt_labels.iter().map(|r| r[phase].as_slice()).collect();
            let gt_imgs: Vec<&Tensor<f32>> = gt_images.iter().map(|r| &r[phase]).collect();
            let eval_sets: Vec<(&'static str, &ArmPrediction, bool)> = arms
                .iter()
                .map(|&(name, _, _)| (name, &preds[name], name == "ct_mask"))
                .chain(std::iter::once(("persistence", &persist, true)))
                .collect();
            for (name, pred, full_metrics) in eval_sets {
                let pred_phase: Vec<&[u8]> =
                    pred.labels.iter().map(|r| r[hp].as_slice()).collect();
                for (organ, label) in &organs {
                    let gt_slab = organ_slab(&gt_phase, *label, nz, nx);
                    let pr_slab = organ_slab(&pred_phase, *label, nz, nx);
                    let ov = overlap_metrics(&pr_slab, &gt_slab)?;
                    report.push(
                        &case_name,
                        organ,
                        phase as u32,
                        &format!("dsc_{name}"),
                        ov.dsc,
                    );
                    report.push(
                        &case_name,
                        organ,
                        phase as u32,
                        &format!("iou_{name}"),
                        ov.iou,
                    );
                    let acc = accum.get_mut(name).expect("arm accum");
                    acc.all_dsc.push(ov.dsc);
                    if organ == &lung {
                        acc.lung_by_case_phase.insert((order, phase), ov.dsc);
                    }
                    if full_metrics {
                        if let SurfaceOutcome::Distances(set) =
                            surface_distances(&pr_slab, &gt_slab, spacing)?
                        {
                            let (msd, hd95) = msd_hd95(&set);
                            report.push(
                                &case_name,
                                organ,
                                phase as u32,
                                &format!("msd_{name}"),
                                msd,
                            );
                            report.push(
                                &case_name,
                                organ,
                                phase as u32,
                                &format!("hd95_{name}"),
                                hd95,
                            );
                        }
                    }
                }
                if full_metrics {
                    let pred_imgs: Vec<&Tensor<f32>> =
                        pred.images.iter().map(|r| &r[hp]).collect();
                    let p = psnr(&image_slab(&pred_imgs), &image_slab(&gt_imgs), 1.0)?;
                    let s = slab_ssim(&pred_imgs, &gt_imgs)?;
                    report.push(&case_name, "image", phase as u32, &format!("psnr_{name}"), p);
                    report.push(&case_name, "image", phase as u32, &format!("ssim_{name}"), s);
                }
            }
            if order == 0 {
                let pred = &preds["ct_mask"];
                let diff = difference_heatmap(&pred.images[mid][hp], &gt_images[mid][phase])?;
                heatmaps.push((
                    format!("motion_case{:03}_row{:02}_phase{}.pgm", case.id, rows[mid], phase),
                    diff,
                ));
            }
        }

        // Auxiliary prompted tasks on the middle band row, phase 0.
        let clean = &gt_images[mid][0];
        let gt_lab = &gt_labels[mid][0];
        let g = cfg.tokenizer.grid_tokens();
        let mut run_prompt = |examples: &[(Vec<usize>, Vec<usize>)],
                              query: &[usize],
                              arm: &'static str|
         -> Result<Tensor<f32>> {
            let prompt = build_paired_prompt(examples, query, &specials)?;
            let mut sampler = SamplerState::new(Sampler::Greedy);
            let (span, evs) =
                complete_prompt(finetuned, &specials, &prompt.tokens, g, &mut sampler)?;
            aux_repairs += evs.len();
            for event in evs {
                repairs.push(RepairRow {
                    arm,
                    case_id: case.id,
                    row: rows[mid],
                    event,
                });
            }
            Ok(decode(tok, &span)?)
        };

        let seg_img = run_prompt(&seg_examples, &codes.img[mid][0], "seg")?;
        let seg_lab = binarize_mask_image(&seg_img, max_label);
        for (organ, label) in &organs {
            let gt2 = organ_slab(&[gt_lab.as_slice()], *label, nz, nx);
            let pr2 = organ_slab(&[seg_lab.as_slice()], *label, nz, nx);
            let ov = overlap_metrics(&pr2, &gt2)?;
            report.push(&case_name, organ, 0, "dsc_seg", ov.dsc);
            seg_dscs.push(ov.dsc);
        }

        let noise_seed = derive_seed(cfg.seed, "eval_noise", &[case.id as u64]);
        let noisy = add_gaussian_noise(clean, cfg.eval.noise_sigma, noise_seed);
        let p_noisy = psnr(&noisy, clean, 1.0)?;
        let den_img = run_prompt(&den_examples, &encode(tok, &noisy)?, "denoise")?;
        let p_den = psnr(&den_img, clean, 1.0)?;
        report.push(&case_name, "image", 0, "psnr_noisy", p_noisy);
        report.push(&case_name, "image", 0, "psnr_denoise", p_den);
        report.push(&case_name, "image", 0, "ssim_denoise", ssim(&den_img, clean)?);
        den_noisy.push(p_noisy);
        den_out.push(p_den);

        let down = block_downsample(clean, cfg.eval.sr_factor)?;
        let nearest = nearest_upsample(&down, cfg.eval.sr_factor)?;
        let p_near = psnr(&nearest, clean, 1.0)?;
        let sr_img = run_prompt(&sr_examples, &encode(tok, &nearest)?, "sr")?;
        let p_sr = psnr(&sr_img, clean, 1.0)?;
        report.push(&case_name, "image", 0, "psnr_nearest", p_near);
        report.push(&case_name, "image", 0, "psnr_sr", p_sr);
        report.push(&case_name, "image", 0, "ssim_sr", ssim(&sr_img, clean)?);
        sr_nearest.push(p_near);
        sr_out.push(p_sr);

        if order == 0 {
            heatmaps.push((
                format!("denoise_case{:03}.pgm", case.id),
                difference_heatmap(&den_img, clean)?,
            ));
            heatmaps.push((
                format!("sr_case{:03}.pgm", case.id),
                difference_heatmap(&sr_img, clean)?,
            ));
        }
        println!(
            "  eval {case_name}: lung dsc ct_mask {:.3} persistence {:.3}",
            mean(
                &horizon
                    .iter()
                    .filter_map(|&p| accum["ct_mask"].lung_by_case_phase.get(&(order, p)))
                    .copied()
                    .collect::<Vec<_>>()
            ),
            mean(
                &horizon
                    .iter()
                    .filter_map(|&p| accum["persistence"].lung_by_case_phase.get(&(order, p)))
                    .copied()
                    .collect::<Vec<_>>()
            ),
        );
    }

    let num_cases = cases.test.len();
    let motion: BTreeMap<String, MotionArmSummary> = accum
        .iter()
        .map(|(name, acc)| (name.to_string(), acc.summary(num_cases, &horizon)))
        .collect();
    let auxiliary = AuxSummary {
        seg_mean_dsc: mean(&seg_dscs),
        denoise_mean_psnr_noisy: mean(&den_noisy),
        denoise_mean_psnr_out: mean(&den_out),
        sr_mean_psnr_nearest: mean(&sr_nearest),
        sr_mean_psnr_out: mean(&sr_out),
        repair_events: aux_repairs,
    };
    let summary = EvalSummary {
        context_phases: l,
        horizon_phases: horizon,
        motion,
        auxiliary,
    };
    Ok(EvalOutputs {
        report,
        summary,
        repairs,
        heatmaps,
    })
}
