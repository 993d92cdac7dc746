//! Overlap, surface-distance, and image-quality metrics.
//!
//! Conventions: overlap values are fractions in [0,1] (CSV consumers may
//! scale to percent), distances are millimetres, PSNR is dB.

mod edt;
mod surface;

pub use edt::edt_sq;
pub use surface::{
    boundary_voxels, hd_max, msd_hd95, percentile_linear, surface_distances,
    surface_distances_bruteforce, SurfaceDistanceSet, SurfaceOutcome,
};

use crate::grid::Grid3;
use crate::numcore::{Real, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("extent mismatch: {lhs:?} vs {rhs:?}")]
    ExtentMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("voxel spacing must be positive and finite, got {0:?}")]
    BadSpacing([f64; 3]),
    #[error("image {h}x{w} smaller than the {window}x{window} SSIM window")]
    WindowTooLarge { h: usize, w: usize, window: usize },
}

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapMetrics {
    pub iou: f64,
    pub dsc: f64,
    /// Exactly one mask was empty; both metrics are 0 by convention.
    pub one_empty: bool,
}

/// IoU and DSC for a binary mask pair. Both-empty pairs count as perfect
/// agreement (1, 1); one-empty pairs as total disagreement (0, 0),
/// flagged.
pub fn overlap_metrics(a: &Grid3<bool>, b: &Grid3<bool>) -> Result<OverlapMetrics> {
    if a.dims() != b.dims() {
        return Err(MetricError::ExtentMismatch {
            lhs: a.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    let mut inter = 0u64;
    let mut na = 0u64;
    let mut nb = 0u64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as u64;
        nb += y as u64;
        inter += (x && y) as u64;
    }
    if na == 0 && nb == 0 {
        return Ok(OverlapMetrics {
            iou: 1.0,
            dsc: 1.0,
            one_empty: false,
        });
    }
    if na == 0 || nb == 0 {
        return Ok(OverlapMetrics {
            iou: 0.0,
            dsc: 0.0,
            one_empty: true,
        });
    }
    let union = na + nb - inter;
    Ok(OverlapMetrics {
        iou: inter as f64 / union as f64,
        dsc: 2.0 * inter as f64 / (na + nb) as f64,
        one_empty: false,
    })
}

/// `2·IoU/(1+IoU)` — the identity DSC must satisfy for any mask pair.
pub fn dsc_from_iou(iou: f64) -> f64 {
    2.0 * iou / (1.0 + iou)
}

pub fn mse<R: Real>(x: &Tensor<R>, y: &Tensor<R>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(MetricError::ExtentMismatch {
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let mut acc = 0.0f64;
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let d = a.to_f64() - b.to_f64();
        acc += d * d;
    }
    Ok(acc / x.numel() as f64)
}

/// `10·log10(max_val²/MSE)`; identical inputs give +∞.
pub fn psnr<R: Real>(x: &Tensor<R>, y: &Tensor<R>, max_val: f64) -> Result<f64> {
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / m).log10())
}

pub const SSIM_WINDOW: usize = 8;

/// Mean SSIM over all 8×8 windows at stride 1 (uniform window,
/// C₁ = 0.01², C₂ = 0.03²), for 2D images in [0,1].
pub fn ssim<R: Real>(x: &Tensor<R>, y: &Tensor<R>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(MetricError::ExtentMismatch {
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let (h, w) = x.dims2().map_err(|_| MetricError::ExtentMismatch {
        lhs: x.shape().to_vec(),
        rhs: vec![],
    })?;
    let win = SSIM_WINDOW;
    if h < win || w < win {
        return Err(MetricError::WindowTooLarge { h, w, window: win });
    }
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let n = (win * win) as f64;
    let xd = x.data();
    let yd = y.data();
    let mut total = 0.0f64;
    let mut windows = 0usize;
    for r in 0..=h - win {
        for c in 0..=w - win {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..win {
                let base = (r + i) * w + c;
                for j in 0..win {
                    let a = xd[base + j].to_f64();
                    let b = yd[base + j].to_f64();
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let mx = sx / n;
            let my = sy / n;
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cov = sxy / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// `|pred − gt|` per pixel, for heatmap export.
pub fn difference_heatmap<R: Real>(pred: &Tensor<R>, gt: &Tensor<R>) -> Result<Tensor<R>> {
    if pred.shape() != gt.shape() {
        return Err(MetricError::ExtentMismatch {
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    Ok(pred
        .zip_map(gt, |a, b| (a - b).abs())
        .expect("shapes checked"))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "spearman input lengths differ");
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// One metric value with its report key.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricEntry {
    pub case_id: String,
    pub organ: String,
    pub phase: u32,
    pub metric: String,
    pub value: f64,
}

/// Accumulated evaluation results; rows sort by
/// (case, organ, phase, metric) so serialization is deterministic.
#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    entries: Vec<MetricEntry>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, case_id: &str, organ: &str, phase: u32, metric: &str, value: f64) {
        self.entries.push(MetricEntry {
            case_id: case_id.to_string(),
            organ: organ.to_string(),
            phase,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn extend(&mut self, other: &MetricsReport) {
        self.entries.extend(other.entries.iter().cloned());
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Entries in canonical order.
    pub fn sorted_entries(&self) -> Vec<MetricEntry> {
        let mut rows = self.entries.clone();
        rows.sort_by(|a, b| {
            (&a.case_id, &a.organ, a.phase, &a.metric)
                .cmp(&(&b.case_id, &b.organ, b.phase, &b.metric))
        });
        rows
    }

    /// Mean of all values for `metric`, filtered by an optional organ.
    pub fn mean_of(&self, metric: &str, organ: Option<&str>) -> Option<f64> {
        let vals: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.metric == metric && organ.is_none_or(|o| e.organ == o))
            .map(|e| e.value)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    pub fn values_of(&self, metric: &str, organ: Option<&str>, phase: Option<u32>) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| {
                e.metric == metric
                    && organ.is_none_or(|o| e.organ == o)
                    && phase.is_none_or(|p| e.phase == p)
            })
            .map(|e| e.value)
            .collect()
    }
}
