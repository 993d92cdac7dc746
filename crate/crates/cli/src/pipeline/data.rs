//! Deterministic data preparation: phantom cases, the shape pretraining
//! corpus, tokenizer image pools, and token-code caches.

use anyhow::{anyhow, Context, Result};
use phasecast::phantom::ShapeSequence;
use phasecast::phantom::{
    add_gaussian_noise, block_downsample, generate_phantom, nearest_upsample, PhantomConfig,
    PhaseSequence,
};
use phasecast::store::config::RunConfig;
use phasecast::store::{write_v4dc, V4dcData, V4dcDtype, V4dcHeader};
use phasecast::tasks::render_mask_image;
use phasecast::tasks::{label_slice, volume_slice};
use phasecast::numcore::Tensor;
use phasecast::tokenizer::{encode, TokenizerParams};
use std::path::Path;

/// Stable stream splitter: mixes the run seed with a role tag and indices
/// so every random draw in the pipeline owns an independent seed.
pub fn derive_seed(base: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for b in tag.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01B3);
    }
    for &p in parts {
        h = (h ^ p).wrapping_mul(0x0100_0000_01B3);
        h ^= h >> 29;
    }
    h
}

pub struct PhantomCase {
    pub id: usize,
    pub seq: PhaseSequence,
}

pub struct CaseSet {
    pub train: Vec<PhantomCase>,
    pub test: Vec<PhantomCase>,
    /// Coronal band shared by every case; fixed by the base geometry so
    /// slabs are comparable across cases.
    pub rows: Vec<usize>,
}

/// Contiguous coronal band spanning all organ-center rows (plus margin).
pub fn eval_rows(cfg: &PhantomConfig, margin: usize) -> Result<Vec<usize>> {
    let rows = cfg.organ_center_rows(margin);
    let lo = *rows.iter().min().ok_or_else(|| anyhow!("no organs"))?;
    let hi = *rows.iter().max().expect("nonempty");
    Ok((lo..=hi).collect())
}

pub fn generate_cases(cfg: &RunConfig) -> Result<CaseSet> {
    let rows = eval_rows(&cfg.phantom, cfg.eval.band_margin)?;
    let make = |id: usize| -> Result<PhantomCase> {
        let case_seed = derive_seed(cfg.seed, "case", &[id as u64]);
        let geom = cfg.phantom.vary_for_case(case_seed)?;
        let seq = generate_phantom(&geom, case_seed)?;
        Ok(PhantomCase { id, seq })
    };
    let train = (0..cfg.eval.train_cases)
        .map(make)
        .collect::<Result<Vec<_>>>()
        .context("train cases")?;
    let test = (cfg.eval.train_cases..cfg.eval.train_cases + cfg.eval.test_cases)
        .map(make)
        .collect::<Result<Vec<_>>>()
        .context("test cases")?;
    Ok(CaseSet { train, test, rows })
}

/// Archive one case as a pair of 4D volumes (intensities + labels).
pub fn write_case_archive(case: &PhantomCase, vol_path: &Path, lab_path: &Path) -> Result<()> {
    let t = case.seq.num_phases();
    let [nz, ny, nx] = case.seq.volumes[0].dims();
    let dims = [t as u32, nz as u32, ny as u32, nx as u32];
    let spacing = case.seq.spacing_mm.map(|s| s as f32);
    let mut vox = Vec::with_capacity(t * nz * ny * nx);
    let mut lab = Vec::with_capacity(t * nz * ny * nx);
    for phase in 0..t {
        vox.extend_from_slice(case.seq.volumes[phase].data());
        lab.extend_from_slice(case.seq.labels[phase].data());
    }
    write_v4dc(
        vol_path,
        &V4dcHeader {
            dtype: V4dcDtype::F32,
            dims,
            spacing,
        },
        &V4dcData::F32(vox),
    )?;
    write_v4dc(
        lab_path,
        &V4dcHeader {
            dtype: V4dcDtype::U8Label,
            dims,
            spacing,
        },
        &V4dcData::U8(lab),
    )?;
    Ok(())
}

pub struct TokenizerPool {
    pub train: Vec<Tensor<f32>>,
    /// Clean phantom slices from test cases; never used for training.
    pub heldout: Vec<Tensor<f32>>,
}

/// How many training cases contribute appearance slices to the tokenizer
/// pool. Coverage saturates quickly; the LM only ever sees token ids.
const POOL_CASES: usize = 16;
const HELDOUT_CASES: usize = 4;

pub fn tokenizer_pool(
    cfg: &RunConfig,
    cases: &CaseSet,
    corpus: &[ShapeSequence],
) -> Result<TokenizerPool> {
    let (h, w) = (cfg.tokenizer.height, cfg.tokenizer.width);
    let t = cfg.phantom.num_phases;
    let mask_phases = dedup_phases(&[0, t / 2]);
    let mut train = Vec::new();
    for case in cases.train.iter().take(POOL_CASES) {
        for &row in &cases.rows {
            for phase in 0..t {
                train.push(volume_slice(&case.seq.volumes[phase], row));
            }
            for &phase in &mask_phases {
                let labels = label_slice(&case.seq.labels[phase], row);
                train.push(render_mask_image(&labels, h, w));
            }
            // Degraded variants keep aux-task inputs in-distribution.
            let base = volume_slice(&case.seq.volumes[0], row);
            let noise_seed = derive_seed(cfg.seed, "tokpool", &[case.id as u64, row as u64]);
            train.push(add_gaussian_noise(&base, cfg.eval.noise_sigma, noise_seed));
            let down = block_downsample(&base, cfg.eval.sr_factor)?;
            train.push(nearest_upsample(&down, cfg.eval.sr_factor)?);
        }
    }
    for seq in corpus {
        train.extend(seq.frames.iter().cloned());
        train.extend(seq.masks.iter().step_by(5).cloned());
    }
    let heldout_phases = dedup_phases(&[0, t / 3, 2 * t / 3]);
    let mut heldout = Vec::new();
    for case in cases.test.iter().take(HELDOUT_CASES) {
        for &row in &cases.rows {
            for &phase in &heldout_phases {
                heldout.push(volume_slice(&case.seq.volumes[phase], row));
            }
        }
    }
    Ok(TokenizerPool { train, heldout })
}

fn dedup_phases(phases: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = phases.to_vec();
    out.sort_unstable();
    out.dedup();
    out
}

/// Token codes for one case over the eval band: indexed `[row][phase]`.
pub struct CaseCodes {
    pub img: Vec<Vec<Vec<usize>>>,
    pub mask: Vec<Vec<Vec<usize>>>,
}

pub fn encode_case(
    tok: &TokenizerParams,
    case: &PhantomCase,
    rows: &[usize],
) -> Result<CaseCodes> {
    let (h, w) = (tok.cfg.height, tok.cfg.width);
    let t = case.seq.num_phases();
    let mut img = Vec::with_capacity(rows.len());
    let mut mask = Vec::with_capacity(rows.len());
    for &row in rows {
        let mut ir = Vec::with_capacity(t);
        let mut mr = Vec::with_capacity(t);
        for phase in 0..t {
            ir.push(encode(tok, &volume_slice(&case.seq.volumes[phase], row))?);
            let labels = label_slice(&case.seq.labels[phase], row);
            mr.push(encode(tok, &render_mask_image(&labels, h, w))?);
        }
        img.push(ir);
        mask.push(mr);
    }
    Ok(CaseCodes { img, mask })
}

/// Token codes for one corpus sequence: frame and mask streams per step.
pub struct SeqCodes {
    pub img: Vec<Vec<usize>>,
    pub mask: Vec<Vec<usize>>,
}

pub fn encode_corpus(tok: &TokenizerParams, corpus: &[ShapeSequence]) -> Result<Vec<SeqCodes>> {
    corpus
        .iter()
        .map(|seq| {
            let img = seq
                .frames
                .iter()
                .map(|f| encode(tok, f))
                .collect::<phasecast::tokenizer::Result<Vec<_>>>()?;
            let mask = seq
                .masks
                .iter()
                .map(|m| encode(tok, m))
                .collect::<phasecast::tokenizer::Result<Vec<_>>>()?;
            Ok(SeqCodes { img, mask })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_separates_tags_and_parts() {
        let a = derive_seed(7, "case", &[1]);
        let b = derive_seed(7, "case", &[2]);
        let c = derive_seed(7, "corpus", &[1]);
        let d = derive_seed(8, "case", &[1]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_eq!(a, derive_seed(7, "case", &[1]));
    }

    #[test]
    fn eval_rows_are_contiguous() {
        let cfg = PhantomConfig::default();
        let rows = eval_rows(&cfg, 1).unwrap();
        for pair in rows.windows(2) {
            assert_eq!(pair[1], pair[0] + 1);
        }
        assert!(rows.len() >= 3);
    }

    #[test]
    fn case_split_is_disjoint_and_deterministic() {
        let mut cfg = RunConfig::default();
        cfg.eval.train_cases = 3;
        cfg.eval.test_cases = 2;
        let a = generate_cases(&cfg).unwrap();
        let b = generate_cases(&cfg).unwrap();
        assert_eq!(a.train.len(), 3);
        assert_eq!(a.test.len(), 2);
        let ids: Vec<usize> = a.train.iter().chain(&a.test).map(|c| c.id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        assert_eq!(
            a.test[0].seq.volumes[0].data(),
            b.test[0].seq.volumes[0].data()
        );
        // Distinct cases differ in geometry.
        assert_ne!(
            a.train[0].seq.labels[0].data(),
            a.train[1].seq.labels[0].data()
        );
    }
}
