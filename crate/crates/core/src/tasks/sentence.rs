//! Sentence layouts.
//!
//! Motion, one block per phase:
//!   image-only:   `BOS (img[G] SEP_PHASE) x T`
//!   image+mask:   `BOS (img[G] SEP_STREAM mask[G] SEP_PHASE) x T`
//! Paired tasks, one block per example:
//!   `BOS (input[G] SEP_STREAM output[G] SEP_PHASE) x k`
//! with prompts ending after a query `input[G] SEP_STREAM`.
//!
//! The loss mask marks target positions only on spans the model must
//! predict (future phases / trained outputs, separators included); BOS
//! and observed context stay unmarked.

use super::{Result, TaskError};
use crate::seqmodel::SpecialTokens;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Imaging stream (phantom frames, task inputs).
    Image,
    /// Paired stream (masks, task outputs).
    Paired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Bos,
    /// A span of code tokens; `block` is the phase or example index.
    Span { block: usize, stream: Stream },
    SepStream,
    SepPhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct VisualSentence {
    pub tokens: Vec<usize>,
    /// `loss_mask[i]` marks `tokens[i]` as a prediction target.
    pub loss_mask: Vec<bool>,
    pub segments: Vec<Segment>,
}

impl VisualSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Code-token span for a given block and stream.
    pub fn span(&self, block: usize, stream: Stream) -> Option<std::ops::Range<usize>> {
        self.segments.iter().find_map(|s| match s.kind {
            SegmentKind::Span { block: b, stream: st } if b == block && st == stream => {
                Some(s.start..s.start + s.len)
            }
            _ => None,
        })
    }

    /// Next-token training pair: inputs drop the last token, and
    /// `targets[i]` is `tokens[i+1]` where marked, `pad_id` otherwise.
    pub fn training_pair(&self, pad_id: usize) -> (Vec<usize>, Vec<usize>) {
        let s = self.tokens.len();
        let inputs = self.tokens[..s - 1].to_vec();
        let targets = (1..s)
            .map(|i| if self.loss_mask[i] { self.tokens[i] } else { pad_id })
            .collect();
        (inputs, targets)
    }

    /// Segments must tile the token list exactly, in order.
    pub fn check_consistency(&self) -> Result<()> {
        if self.tokens.len() != self.loss_mask.len() {
            return Err(TaskError::Sentence(format!(
                "loss mask length {} != tokens {}",
                self.loss_mask.len(),
                self.tokens.len()
            )));
        }
        let mut cursor = 0usize;
        for seg in &self.segments {
            if seg.start != cursor {
                return Err(TaskError::Sentence(format!(
                    "segment {:?} starts at {} instead of {}",
                    seg.kind, seg.start, cursor
                )));
            }
            cursor += seg.len;
        }
        if cursor != self.tokens.len() {
            return Err(TaskError::Sentence(format!(
                "segments cover {} of {} tokens",
                cursor,
                self.tokens.len()
            )));
        }
        Ok(())
    }
}

struct Builder<'a> {
    specials: &'a SpecialTokens,
    tokens: Vec<usize>,
    loss_mask: Vec<bool>,
    segments: Vec<Segment>,
}

impl<'a> Builder<'a> {
    fn new(specials: &'a SpecialTokens) -> Self {
        let mut b = Builder {
            specials,
            tokens: Vec::new(),
            loss_mask: Vec::new(),
            segments: Vec::new(),
        };
        b.push_one(b.specials.bos, false, SegmentKind::Bos);
        b
    }

    fn push_one(&mut self, token: usize, marked: bool, kind: SegmentKind) {
        self.segments.push(Segment {
            kind,
            start: self.tokens.len(),
            len: 1,
        });
        self.tokens.push(token);
        self.loss_mask.push(marked);
    }

    fn push_span(
        &mut self,
        codes: &[usize],
        marked: bool,
        block: usize,
        stream: Stream,
    ) -> Result<()> {
        for &c in codes {
            if c >= self.specials.bos {
                return Err(TaskError::Sentence(format!(
                    "code token {c} collides with specials (codebook size {})",
                    self.specials.bos
                )));
            }
        }
        self.segments.push(Segment {
            kind: SegmentKind::Span { block, stream },
            start: self.tokens.len(),
            len: codes.len(),
        });
        self.tokens.extend_from_slice(codes);
        self.loss_mask.extend(std::iter::repeat(marked).take(codes.len()));
        Ok(())
    }

    fn finish(self) -> VisualSentence {
        VisualSentence {
            tokens: self.tokens,
            loss_mask: self.loss_mask,
            segments: self.segments,
        }
    }
}

fn check_uniform_spans(spans: &[Vec<usize>], what: &str) -> Result<usize> {
    let g = spans.first().map(|s| s.len()).unwrap_or(0);
    if g == 0 {
        return Err(TaskError::Sentence(format!("{what} spans must be non-empty")));
    }
    if let Some(bad) = spans.iter().find(|s| s.len() != g) {
        return Err(TaskError::Sentence(format!(
            "{what} span length {} != {g}",
            bad.len()
        )));
    }
    Ok(g)
}

/// Motion sentence over `T = image_codes.len()` phases. Phases at index
/// `>= context_phases` are loss-marked (separators included). Pass
/// `context_phases == T` to build an unmarked prompt prefix.
pub fn build_motion_sentence(
    image_codes: &[Vec<usize>],
    mask_codes: Option<&[Vec<usize>]>,
    specials: &SpecialTokens,
    context_phases: usize,
) -> Result<VisualSentence> {
    let t = image_codes.len();
    if t == 0 {
        return Err(TaskError::Sentence("no phases".into()));
    }
    if context_phases > t {
        return Err(TaskError::Sentence(format!(
            "context {context_phases} exceeds {t} phases"
        )));
    }
    check_uniform_spans(image_codes, "image")?;
    if let Some(masks) = mask_codes {
        if masks.len() != t {
            return Err(TaskError::Sentence(format!(
                "mask stream has {} phases, images {t}",
                masks.len()
            )));
        }
        check_uniform_spans(masks, "mask")?;
    }
    let mut b = Builder::new(specials);
    for (phase, img) in image_codes.iter().enumerate() {
        let marked = phase >= context_phases;
        b.push_span(img, marked, phase, Stream::Image)?;
        if let Some(masks) = mask_codes {
            b.push_one(specials.sep_stream, marked, SegmentKind::SepStream);
            b.push_span(&masks[phase], marked, phase, Stream::Paired)?;
        }
        b.push_one(specials.sep_phase, marked, SegmentKind::SepPhase);
    }
    let s = b.finish();
    s.check_consistency()?;
    Ok(s)
}

/// Complete paired-task sentence: every example is a full
/// `input SEP_STREAM output SEP_PHASE` block. Outputs of examples at
/// index `>= loss_from` are loss-marked.
pub fn build_paired_sentence(
    pairs: &[(Vec<usize>, Vec<usize>)],
    specials: &SpecialTokens,
    loss_from: usize,
) -> Result<VisualSentence> {
    if pairs.is_empty() {
        return Err(TaskError::Sentence("no example pairs".into()));
    }
    let inputs: Vec<Vec<usize>> = pairs.iter().map(|(i, _)| i.clone()).collect();
    let outputs: Vec<Vec<usize>> = pairs.iter().map(|(_, o)| o.clone()).collect();
    let gi = check_uniform_spans(&inputs, "input")?;
    let go = check_uniform_spans(&outputs, "output")?;
    if gi != go {
        return Err(TaskError::Sentence(format!(
            "input span {gi} != output span {go}"
        )));
    }
    let mut b = Builder::new(specials);
    for (k, (input, output)) in pairs.iter().enumerate() {
        let marked = k >= loss_from;
        b.push_span(input, false, k, Stream::Image)?;
        b.push_one(specials.sep_stream, false, SegmentKind::SepStream);
        b.push_span(output, marked, k, Stream::Paired)?;
        b.push_one(specials.sep_phase, marked, SegmentKind::SepPhase);
    }
    let s = b.finish();
    s.check_consistency()?;
    Ok(s)
}

/// Prompt for one query: `k` complete example blocks, then the query
/// input and a trailing SEP_STREAM. The model owes exactly one output
/// span.
pub fn build_paired_prompt(
    examples: &[(Vec<usize>, Vec<usize>)],
    query: &[usize],
    specials: &SpecialTokens,
) -> Result<VisualSentence> {
    if query.is_empty() {
        return Err(TaskError::Sentence("empty query".into()));
    }
    let mut b = Builder::new(specials);
    for (k, (input, output)) in examples.iter().enumerate() {
        if input.len() != query.len() || output.len() != query.len() {
            return Err(TaskError::Sentence(format!(
                "example {k} span lengths {}x{} != query {}",
                input.len(),
                output.len(),
                query.len()
            )));
        }
        b.push_span(input, false, k, Stream::Image)?;
        b.push_one(specials.sep_stream, false, SegmentKind::SepStream);
        b.push_span(output, false, k, Stream::Paired)?;
        b.push_one(specials.sep_phase, false, SegmentKind::SepPhase);
    }
    b.push_span(query, false, examples.len(), Stream::Image)?;
    b.push_one(specials.sep_stream, false, SegmentKind::SepStream);
    let s = b.finish();
    s.check_consistency()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specials() -> SpecialTokens {
        SpecialTokens::for_codebook(16)
    }

    fn codes(t: usize, g: usize, base: usize) -> Vec<Vec<usize>> {
        (0..t).map(|p| vec![(base + p) % 16; g]).collect()
    }

    #[test]
    fn motion_lengths_match_closed_forms() {
        let sp = specials();
        let (t, g) = (10, 32);
        let imgs = codes(t, g, 0);
        let only = build_motion_sentence(&imgs, None, &sp, 1).unwrap();
        assert_eq!(only.len(), 1 + t * (g + 1));
        let masks = codes(t, g, 5);
        let both = build_motion_sentence(&imgs, Some(&masks), &sp, 1).unwrap();
        assert_eq!(both.len(), 1 + t * (2 * g + 2));
    }

    #[test]
    fn loss_mask_marks_exactly_the_future_blocks() {
        let sp = specials();
        let (t, g, l) = (6, 4, 2);
        let s = build_motion_sentence(&codes(t, g, 0), None, &sp, l).unwrap();
        let marked = s.loss_mask.iter().filter(|&&m| m).count();
        assert_eq!(marked, (t - l) * (g + 1));
        // BOS and context blocks unmarked.
        assert!(!s.loss_mask[0]);
        assert!(s.loss_mask[1 + l * (g + 1)..].iter().all(|&m| m));
        assert!(!s.loss_mask[..1 + l * (g + 1)].iter().any(|&m| m));
    }

    #[test]
    fn training_pair_aligns_targets_to_next_token() {
        let sp = specials();
        let s = build_motion_sentence(&codes(3, 2, 1), None, &sp, 1).unwrap();
        let (inputs, targets) = s.training_pair(sp.pad);
        assert_eq!(inputs.len(), s.len() - 1);
        assert_eq!(targets.len(), s.len() - 1);
        for i in 0..inputs.len() {
            if targets[i] != sp.pad {
                assert_eq!(targets[i], s.tokens[i + 1]);
                assert!(s.loss_mask[i + 1]);
            } else {
                // Either genuinely masked, or (never here) a real PAD.
                assert!(!s.loss_mask[i + 1]);
            }
        }
        // At least the future image codes are present as targets.
        assert!(targets.iter().filter(|&&t| t != sp.pad).count() >= 2 * (2 + 1));
    }

    #[test]
    fn spans_are_retrievable_and_exact() {
        let sp = specials();
        let imgs = codes(4, 3, 0);
        let masks = codes(4, 3, 7);
        let s = build_motion_sentence(&imgs, Some(&masks), &sp, 2).unwrap();
        for p in 0..4 {
            let ri = s.span(p, Stream::Image).unwrap();
            assert_eq!(&s.tokens[ri], imgs[p].as_slice());
            let rm = s.span(p, Stream::Paired).unwrap();
            assert_eq!(&s.tokens[rm], masks[p].as_slice());
        }
        assert!(s.span(4, Stream::Image).is_none());
    }

    #[test]
    fn paired_prompt_length_matches_closed_form() {
        let sp = specials();
        let g = 32;
        let ex: Vec<(Vec<usize>, Vec<usize>)> =
            (0..2).map(|k| (vec![k; g], vec![k + 3; g])).collect();
        let p = build_paired_prompt(&ex, &vec![9; g], &sp).unwrap();
        assert_eq!(p.len(), 1 + 2 * (2 * g + 2) + g + 1);
        assert_eq!(*p.tokens.last().unwrap(), sp.sep_stream);
        assert!(!p.loss_mask.iter().any(|&m| m));
    }

    #[test]
    fn paired_sentence_marks_trained_outputs_only() {
        let sp = specials();
        let g = 4;
        let pairs: Vec<(Vec<usize>, Vec<usize>)> =
            (0..3).map(|k| (vec![k; g], vec![k + 8; g])).collect();
        let s = build_paired_sentence(&pairs, &sp, 1).unwrap();
        assert_eq!(s.len(), 1 + 3 * (2 * g + 2));
        let marked = s.loss_mask.iter().filter(|&&m| m).count();
        assert_eq!(marked, 2 * (g + 1)); // outputs + SEP_PHASE of examples 1,2
        let out0 = s.span(0, Stream::Paired).unwrap();
        assert!(!s.loss_mask[out0].iter().any(|&m| m));
        let out2 = s.span(2, Stream::Paired).unwrap();
        assert!(s.loss_mask[out2].iter().all(|&m| m));
        // Inputs are never targets in paired sentences.
        for k in 0..3 {
            let ri = s.span(k, Stream::Image).unwrap();
            assert!(!s.loss_mask[ri].iter().any(|&m| m));
        }
    }

    #[test]
    fn builders_reject_malformed_input() {
        let sp = specials();
        // Code colliding with specials.
        let bad = vec![vec![16usize; 4]];
        assert!(build_motion_sentence(&bad, None, &sp, 0).is_err());
        // Ragged spans.
        let ragged = vec![vec![1usize; 4], vec![1usize; 3]];
        assert!(build_motion_sentence(&ragged, None, &sp, 0).is_err());
        // Mask phase count mismatch.
        let imgs = codes(3, 4, 0);
        let masks = codes(2, 4, 1);
        assert!(build_motion_sentence(&imgs, Some(&masks), &sp, 0).is_err());
        // Context beyond length.
        assert!(build_motion_sentence(&imgs, None, &sp, 4).is_err());
    }
}
