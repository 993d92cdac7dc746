//! Label <-> intensity mapping for mask streams.
//!
//! Masks travel through the tokenizer as ordinary images: label `k`
//! renders at intensity `k/4`, and decoding snaps each pixel back to the
//! nearest level. Quarter steps keep up to four foreground labels
//! separated by far more than typical reconstruction error.

use crate::numcore::Tensor;
use crate::phantom::PhantomConfig;

pub const MASK_LEVEL_STEP: f32 = 0.25;

/// Render a label plane (row-major `h x w`) as a quarter-level image.
/// Labels above 4 would exceed intensity 1 and panic.
pub fn render_mask_image(labels: &[u8], h: usize, w: usize) -> Tensor<f32> {
    assert_eq!(labels.len(), h * w, "label plane extents");
    let data = labels
        .iter()
        .map(|&l| {
            assert!(l <= 4, "label {l} not renderable in quarter levels");
            l as f32 * MASK_LEVEL_STEP
        })
        .collect();
    Tensor::new(&[h, w], data).expect("shape/data")
}

/// Classify each pixel to the `(label, level)` pair with the nearest
/// level. Ties resolve to the earliest entry, so list labels ascending.
pub fn classify_by_levels(img: &Tensor<f32>, levels: &[(u8, f32)]) -> Vec<u8> {
    assert!(!levels.is_empty(), "need at least one level");
    img.data()
        .iter()
        .map(|&v| {
            let mut best = levels[0].0;
            let mut best_d = (v - levels[0].1).abs();
            for &(label, level) in &levels[1..] {
                let d = (v - level).abs();
                if d < best_d {
                    best_d = d;
                    best = label;
                }
            }
            best
        })
        .collect()
}

/// Snap a decoded mask image back to labels `0..=num_labels`.
pub fn binarize_mask_image(img: &Tensor<f32>, num_labels: u8) -> Vec<u8> {
    let levels: Vec<(u8, f32)> = (0..=num_labels)
        .map(|l| (l, l as f32 * MASK_LEVEL_STEP))
        .collect();
    classify_by_levels(img, &levels)
}

/// Intensity classes of a phantom configuration: background at its mean
/// level (base plus half the total gradient), then each organ at its
/// nominal intensity, ascending by label.
pub fn intensity_classes(cfg: &PhantomConfig) -> Vec<(u8, f32)> {
    let bg = cfg.background_base
        + (cfg.background_gradient[0] + cfg.background_gradient[1] + cfg.background_gradient[2])
            / 2.0;
    let mut classes = vec![(0u8, bg as f32)];
    let mut organs: Vec<(u8, f32)> = cfg
        .organs
        .iter()
        .map(|o| (o.label, o.intensity as f32))
        .collect();
    organs.sort_by_key(|&(l, _)| l);
    classes.extend(organs);
    classes
}
