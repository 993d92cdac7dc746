//! Visual-sentence task interface: serialize phase sequences into token
//! sentences, drive structure-enforced generation, and map between mask
//! labels and image intensities.
//!
//! Every task — motion prediction, segmentation, denoising,
//! super-resolution — is the same next-token problem; only the sentence
//! layout differs.

mod labels;
mod rollout;
mod sentence;

pub use labels::{
    binarize_mask_image, classify_by_levels, intensity_classes, render_mask_image,
    MASK_LEVEL_STEP,
};
pub use rollout::{complete_prompt, rollout_motion, MotionRollout, RepairEvent};
pub use sentence::{
    build_motion_sentence, build_paired_prompt, build_paired_sentence, Segment, SegmentKind,
    Stream, VisualSentence,
};

use crate::grid::Grid3;
use crate::numcore::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("sentence error: {0}")]
    Sentence(String),
    #[error(transparent)]
    Model(#[from] crate::seqmodel::ModelError),
    #[error(transparent)]
    Num(#[from] crate::numcore::NumError),
}

pub type Result<T> = std::result::Result<T, TaskError>;

/// Coronal intensity slice at row `y` as an `[Z, X]` image.
pub fn volume_slice(vol: &Grid3<f32>, y: usize) -> Tensor<f32> {
    let [nz, _, nx] = vol.dims();
    Tensor::new(&[nz, nx], vol.slice_y(y)).expect("slice extents")
}

/// Coronal label slice at row `y`, flattened Z-major.
pub fn label_slice(labels: &Grid3<u8>, y: usize) -> Vec<u8> {
    labels.slice_y(y)
}

/// The trivial motion baseline: the last observed context frame is the
/// prediction for every future phase.
pub fn persistence_prediction<T: Clone>(context: &[T]) -> Option<T> {
    context.last().cloned()
}
