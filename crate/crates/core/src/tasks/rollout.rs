//! Structure-enforced generation.
//!
//! The sentence grammar is fixed, so separators are never sampled: the
//! decoder emits exactly `G` code tokens per span and the driver feeds
//! the delimiter itself. If the sampler picks a special token inside a
//! span, the pick is repaired to the best code token and the event is
//! recorded — predictions stay well-formed and repairs stay auditable.

use super::Result;
use crate::numcore::Real;
use crate::seqmodel::{argmax, KvDecoder, LMParams, SamplerState, SpecialTokens};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RepairEvent {
    /// Future-phase index (or 0 for single-span completions).
    pub phase: usize,
    /// Slot within the span.
    pub slot: usize,
    pub offending: usize,
    pub replacement: usize,
}

#[derive(Debug, Clone)]
pub struct MotionRollout {
    /// Per future phase: exactly `grid_tokens` code ids.
    pub image_codes: Vec<Vec<usize>>,
    /// Present when rolling out the image+mask layout.
    pub mask_codes: Option<Vec<Vec<usize>>>,
    pub repairs: Vec<RepairEvent>,
}

/// Sample one code token; out-of-span picks are replaced by the argmax
/// over the code region `0..codebook_size`.
fn pick_code<R: Real>(
    logits: &[R],
    codebook_size: usize,
    sampler: &mut SamplerState,
    phase: usize,
    slot: usize,
    repairs: &mut Vec<RepairEvent>,
) -> usize {
    let raw = sampler.pick(logits);
    if raw < codebook_size {
        return raw;
    }
    let fixed = argmax(&logits[..codebook_size]);
    repairs.push(RepairEvent {
        phase,
        slot,
        offending: raw,
        replacement: fixed,
    });
    fixed
}

fn generate_span<R: Real>(
    decoder: &mut KvDecoder<R>,
    logits: &mut Vec<R>,
    g: usize,
    codebook_size: usize,
    sampler: &mut SamplerState,
    phase: usize,
    repairs: &mut Vec<RepairEvent>,
) -> Result<Vec<usize>> {
    let mut span = Vec::with_capacity(g);
    for slot in 0..g {
        let code = pick_code(logits, codebook_size, sampler, phase, slot, repairs);
        span.push(code);
        *logits = decoder.step(code)?;
    }
    Ok(span)
}

/// Continue a motion prompt (which must end right after a SEP_PHASE) for
/// `future_phases` more phase blocks of `grid_tokens` codes each.
pub fn rollout_motion<R: Real>(
    params: &LMParams<R>,
    specials: &SpecialTokens,
    prompt: &[usize],
    grid_tokens: usize,
    future_phases: usize,
    with_mask_stream: bool,
    sampler: &mut SamplerState,
) -> Result<MotionRollout> {
    let mut decoder = KvDecoder::new(params);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = decoder.step(t)?;
    }
    let mut repairs = Vec::new();
    let mut image_codes = Vec::with_capacity(future_phases);
    let mut mask_codes = with_mask_stream.then(Vec::new);
    let k = specials.bos;
    for p in 0..future_phases {
        let img = generate_span(
            &mut decoder,
            &mut logits,
            grid_tokens,
            k,
            sampler,
            p,
            &mut repairs,
        )?;
        image_codes.push(img);
        if let Some(masks) = mask_codes.as_mut() {
            logits = decoder.step(specials.sep_stream)?;
            let m = generate_span(
                &mut decoder,
                &mut logits,
                grid_tokens,
                k,
                sampler,
                p,
                &mut repairs,
            )?;
            masks.push(m);
        }
        // The final separator still has to be fed for all but the last
        // phase; feeding it on the last phase keeps positions uniform.
        logits = decoder.step(specials.sep_phase)?;
    }
    Ok(MotionRollout {
        image_codes,
        mask_codes,
        repairs,
    })
}

/// Complete a paired-task prompt (ending in SEP_STREAM) with one output
/// span.
pub fn complete_prompt<R: Real>(
    params: &LMParams<R>,
    specials: &SpecialTokens,
    prompt: &[usize],
    grid_tokens: usize,
    sampler: &mut SamplerState,
) -> Result<(Vec<usize>, Vec<RepairEvent>)> {
    let mut decoder = KvDecoder::new(params);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = decoder.step(t)?;
    }
    let mut repairs = Vec::new();
    let span = generate_span(
        &mut decoder,
        &mut logits,
        grid_tokens,
        specials.bos,
        sampler,
        0,
        &mut repairs,
    )?;
    Ok((span, repairs))
}
