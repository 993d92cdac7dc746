//! Procedural 4D breathing phantom with analytic organ masks, plus the
//! task degradations (noise, downsampling) and the non-medical
//! pretraining corpus.
//!
//! All geometry is closed-form: organ ellipsoids move and inflate along
//! the cycle `u(φ) = (1 − cos 2πφ)/2`, so ground-truth masks are exact
//! re-evaluations of the same expression, never approximations.

mod corpus;

pub use corpus::{generate_pretrain_corpus, CorpusConfig, ShapeSequence};

use crate::grid::Grid3;
use crate::numcore::{Real, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("config error: {0}")]
    Config(String),
    #[error(
        "organ `{organ}` exits grid at phase {phase}: axis {axis} spans \
         [{lo:.2}, {hi:.2}] mm of [0, {extent:.2}]"
    )]
    OrganOutOfGrid {
        organ: String,
        phase: usize,
        axis: char,
        lo: f64,
        hi: f64,
        extent: f64,
    },
    #[error("factor {r} does not divide extents {h}x{w}")]
    NonDivisible { r: usize, h: usize, w: usize },
}

pub type Result<T> = std::result::Result<T, PhantomError>;

/// One ellipsoidal organ analogue. Millimetre coordinates are (z, y, x)
/// with the origin at the grid corner; voxel centers sit at
/// `(i + 0.5) · spacing`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganSpec {
    pub name: String,
    /// Label id; 0 is background, so labels start at 1.
    pub label: u8,
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
    /// Normalized intensity analogue in [0,1].
    pub intensity: f64,
    /// Per-axis displacement as a fraction of the breathing amplitude.
    pub coupling: [f64; 3],
    /// Fractional semi-axis growth at full inhale.
    pub inflation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    /// Voxels per axis, (Z, Y, X).
    pub dims: [usize; 3],
    /// Millimetres per voxel, (Z, Y, X).
    pub spacing_mm: [f64; 3],
    pub num_phases: usize,
    pub organs: Vec<OrganSpec>,
    /// Superior–inferior breathing amplitude, mm.
    pub amplitude_mm: f64,
    pub texture_sigma: f64,
    /// Background intensity at the grid origin.
    pub background_base: f64,
    /// Linear intensity drift over each axis, (Z, Y, X), total over the
    /// full extent.
    pub background_gradient: [f64; 3],
    /// Extra per-case variation applied by [`PhantomConfig::vary_for_case`]:
    /// center shifts up to this many mm.
    pub case_center_jitter_mm: f64,
    /// Semi-axes scale within [1−j, 1+j].
    pub case_axes_jitter: f64,
    /// Amplitude scale within [1−j, 1+j].
    pub case_amplitude_jitter: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [32, 64, 64],
            spacing_mm: [2.0, 1.0, 1.0],
            num_phases: 10,
            organs: default_organs(),
            amplitude_mm: 12.0,
            texture_sigma: 0.015,
            background_base: 0.12,
            background_gradient: [0.04, 0.03, 0.05],
            case_center_jitter_mm: 2.0,
            case_axes_jitter: 0.06,
            case_amplitude_jitter: 0.1,
        }
    }
}

/// Lung-, heart-, and liver-analogues sized for the default 64 mm cube.
/// List order is rasterization priority: later organs overwrite earlier.
pub fn default_organs() -> Vec<OrganSpec> {
    vec![
        OrganSpec {
            name: "lung".into(),
            label: 1,
            center_mm: [22.0, 32.0, 30.0],
            semi_axes_mm: [13.0, 17.0, 15.0],
            intensity: 0.30,
            coupling: [0.55, 0.0, 0.06],
            inflation: 0.12,
        },
        OrganSpec {
            name: "heart".into(),
            label: 2,
            center_mm: [34.0, 30.0, 49.0],
            semi_axes_mm: [8.0, 10.0, 7.0],
            intensity: 0.55,
            coupling: [0.3, 0.0, 0.0],
            inflation: 0.05,
        },
        OrganSpec {
            name: "liver".into(),
            label: 3,
            center_mm: [48.0, 34.0, 28.0],
            semi_axes_mm: [9.0, 14.0, 14.0],
            intensity: 0.80,
            coupling: [-0.5, 0.0, 0.1],
            inflation: 0.04,
        },
    ]
}

impl PhantomConfig {
    pub fn extent_mm(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing_mm[0],
            self.dims[1] as f64 * self.spacing_mm[1],
            self.dims[2] as f64 * self.spacing_mm[2],
        ]
    }

    /// Reject invalid settings, including any organ leaving the grid at
    /// any of the T phases.
    pub fn validate(&self) -> Result<()> {
        if self.num_phases < 2 {
            return Err(PhantomError::Config(format!(
                "num_phases must be >= 2, got {}",
                self.num_phases
            )));
        }
        if self.amplitude_mm < 0.0 {
            return Err(PhantomError::Config("amplitude_mm must be >= 0".into()));
        }
        if self.dims.iter().any(|&d| d < 8) {
            return Err(PhantomError::Config(format!(
                "grid extents must be >= 8 per axis, got {:?}",
                self.dims
            )));
        }
        if self.spacing_mm.iter().any(|&s| s <= 0.0) {
            return Err(PhantomError::Config(format!(
                "spacing must be positive, got {:?}",
                self.spacing_mm
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for organ in &self.organs {
            if organ.label == 0 {
                return Err(PhantomError::Config(format!(
                    "organ `{}` uses reserved background label 0",
                    organ.name
                )));
            }
            if !seen.insert(organ.label) {
                return Err(PhantomError::Config(format!(
                    "duplicate organ label {}",
                    organ.label
                )));
            }
            if organ.semi_axes_mm.iter().any(|&a| a <= 0.0) {
                return Err(PhantomError::Config(format!(
                    "organ `{}` has non-positive semi-axes",
                    organ.name
                )));
            }
            if !(0.0..=1.0).contains(&organ.intensity) {
                return Err(PhantomError::Config(format!(
                    "organ `{}` intensity {} outside [0,1]",
                    organ.name, organ.intensity
                )));
            }
        }
        let extent = self.extent_mm();
        let axes = ['z', 'y', 'x'];
        for t in 0..self.num_phases {
            let phi = t as f64 / self.num_phases as f64;
            for organ in &self.organs {
                let (center, semi) = organ_geometry(organ, self, phi);
                for a in 0..3 {
                    let (lo, hi) = (center[a] - semi[a], center[a] + semi[a]);
                    if lo < 0.0 || hi > extent[a] {
                        return Err(PhantomError::OrganOutOfGrid {
                            organ: organ.name.clone(),
                            phase: t,
                            axis: axes[a],
                            lo,
                            hi,
                            extent: extent[a],
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Derive the per-case variant: organ positions, sizes, and breathing
    /// amplitude jittered deterministically from `case_seed`. The variant
    /// is re-validated so jitter can never push an organ off-grid.
    pub fn vary_for_case(&self, case_seed: u64) -> Result<PhantomConfig> {
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed.wrapping_mul(0x9E3779B97F4A7C15));
        let mut out = self.clone();
        let aj = self.case_amplitude_jitter;
        out.amplitude_mm *= 1.0 + rng.gen_range(-aj..=aj);
        for organ in &mut out.organs {
            for c in organ.center_mm.iter_mut() {
                *c += rng.gen_range(-self.case_center_jitter_mm..=self.case_center_jitter_mm);
            }
            let sj = self.case_axes_jitter;
            let s = 1.0 + rng.gen_range(-sj..=sj);
            for a in organ.semi_axes_mm.iter_mut() {
                *a *= s;
            }
        }
        out.validate()?;
        Ok(out)
    }

    /// Coronal evaluation rows: each organ's center y index ± `margin`,
    /// deduplicated and sorted.
    pub fn organ_center_rows(&self, margin: usize) -> Vec<usize> {
        let mut rows = std::collections::BTreeSet::new();
        for organ in &self.organs {
            let y = (organ.center_mm[1] / self.spacing_mm[1]) as isize;
            for d in -(margin as isize)..=margin as isize {
                let r = y + d;
                if r >= 0 && (r as usize) < self.dims[1] {
                    rows.insert(r as usize);
                }
            }
        }
        rows.into_iter().collect()
    }
}

/// Breathing profile: 0 at exhale, 1 at full inhale, with slow dwell near
/// exhale.
pub fn breathing_u(phi: f64) -> f64 {
    (1.0 - (2.0 * std::f64::consts::PI * phi).cos()) / 2.0
}

/// Closed-form organ pose at phase fraction `phi`:
/// center = base + coupling·A·u, semi-axes = base·(1 + inflation·u).
/// Zero amplitude means breath-hold: the whole cycle freezes, inflation
/// included.
pub fn organ_geometry(
    spec: &OrganSpec,
    cfg: &PhantomConfig,
    phi: f64,
) -> ([f64; 3], [f64; 3]) {
    let u = if cfg.amplitude_mm == 0.0 {
        0.0
    } else {
        breathing_u(phi)
    };
    let mut center = [0.0; 3];
    let mut semi = [0.0; 3];
    for a in 0..3 {
        center[a] = spec.center_mm[a] + spec.coupling[a] * cfg.amplitude_mm * u;
        semi[a] = spec.semi_axes_mm[a] * (1.0 + spec.inflation * u);
    }
    (center, semi)
}

/// A full breathing cycle: T intensity volumes with matching label
/// volumes, on one spacing.
#[derive(Debug, Clone)]
pub struct PhaseSequence {
    pub volumes: Vec<Grid3<f32>>,
    pub labels: Vec<Grid3<u8>>,
    pub spacing_mm: [f64; 3],
}

impl PhaseSequence {
    pub fn num_phases(&self) -> usize {
        self.volumes.len()
    }

    pub fn organ_mask(&self, t: usize, label: u8) -> Grid3<bool> {
        self.labels[t].map(|&l| l == label)
    }
}

/// Rasterize all phases. Labels follow organ list order (later organs
/// overwrite earlier); intensity = organ (or background) + linear
/// gradient + seeded Gaussian texture, clamped to [0,1].
pub fn generate_phantom(cfg: &PhantomConfig, seed: u64) -> Result<PhaseSequence> {
    cfg.validate()?;
    let [nz, ny, nx] = cfg.dims;
    let extent = cfg.extent_mm();
    let mut volumes = Vec::with_capacity(cfg.num_phases);
    let mut labels = Vec::with_capacity(cfg.num_phases);
    for t in 0..cfg.num_phases {
        let phi = t as f64 / cfg.num_phases as f64;
        let poses: Vec<([f64; 3], [f64; 3])> = cfg
            .organs
            .iter()
            .map(|o| organ_geometry(o, cfg, phi))
            .collect();
        let mut vol = Grid3::filled([nz, ny, nx], 0f32);
        let mut lab = Grid3::filled([nz, ny, nx], 0u8);
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(t as u64),
        );
        let noise = Normal::new(0.0, cfg.texture_sigma).map_err(|e| {
            PhantomError::Config(format!("texture_sigma: {e}"))
        })?;
        for z in 0..nz {
            let zm = (z as f64 + 0.5) * cfg.spacing_mm[0];
            for y in 0..ny {
                let ym = (y as f64 + 0.5) * cfg.spacing_mm[1];
                for x in 0..nx {
                    let xm = (x as f64 + 0.5) * cfg.spacing_mm[2];
                    let mut label = 0u8;
                    let mut core = cfg.background_base;
                    for (o, (center, semi)) in cfg.organs.iter().zip(&poses) {
                        let dz = (zm - center[0]) / semi[0];
                        let dy = (ym - center[1]) / semi[1];
                        let dx = (xm - center[2]) / semi[2];
                        if dz * dz + dy * dy + dx * dx <= 1.0 {
                            label = o.label;
                            core = o.intensity;
                        }
                    }
                    let grad = cfg.background_gradient[0] * (zm / extent[0])
                        + cfg.background_gradient[1] * (ym / extent[1])
                        + cfg.background_gradient[2] * (xm / extent[2]);
                    let v = (core + grad + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    vol.set(z, y, x, v as f32);
                    lab.set(z, y, x, label);
                }
            }
        }
        volumes.push(vol);
        labels.push(lab);
    }
    Ok(PhaseSequence {
        volumes,
        labels,
        spacing_mm: cfg.spacing_mm,
    })
}

/// Add clamped i.i.d. Gaussian noise to a 2D image.
pub fn add_gaussian_noise<R: Real>(img: &Tensor<R>, sigma: f64, seed: u64) -> Tensor<R> {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("sigma >= 0");
    let mut out = img.clone();
    for v in out.data_mut() {
        let n = noise.sample(&mut rng);
        *v = R::from_f64((v.to_f64() + n).clamp(0.0, 1.0));
    }
    out
}

/// Mean over r×r blocks; `r` must divide both extents.
pub fn block_downsample<R: Real>(img: &Tensor<R>, r: usize) -> Result<Tensor<R>> {
    let (h, w) = img
        .dims2()
        .map_err(|e| PhantomError::Config(e.to_string()))?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(PhantomError::NonDivisible { r, h, w });
    }
    let (ho, wo) = (h / r, w / r);
    let inv = R::from_f64(1.0 / (r * r) as f64);
    let d = img.data();
    let mut out = Tensor::zeros(&[ho, wo]);
    let od = out.data_mut();
    for by in 0..ho {
        for bx in 0..wo {
            let mut acc = R::zero();
            for dy in 0..r {
                for dx in 0..r {
                    acc = acc + d[(by * r + dy) * w + bx * r + dx];
                }
            }
            od[by * wo + bx] = acc * inv;
        }
    }
    Ok(out)
}

/// Repeat each pixel into an r×r block (exact inverse of
/// [`block_downsample`] on piecewise-constant images).
pub fn nearest_upsample<R: Real>(img: &Tensor<R>, r: usize) -> Result<Tensor<R>> {
    let (h, w) = img
        .dims2()
        .map_err(|e| PhantomError::Config(e.to_string()))?;
    if r == 0 {
        return Err(PhantomError::NonDivisible { r, h, w });
    }
    let d = img.data();
    let mut out = Tensor::zeros(&[h * r, w * r]);
    let od = out.data_mut();
    for y in 0..h * r {
        for x in 0..w * r {
            od[y * w * r + x] = d[(y / r) * w + x / r];
        }
    }
    Ok(out)
}
