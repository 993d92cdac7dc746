//! Non-medical pretraining corpus: sequences of textured 2D shapes under
//! smooth parametric motion, with paired shape masks.
//!
//! The palette is deliberately disjoint from the phantom — bright shapes
//! on a dark, gradient-free background — so transfer to the phantom is a
//! real domain shift rather than memorization.

use crate::numcore::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{PhantomError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub height: usize,
    pub width: usize,
    pub num_sequences: usize,
    pub frames_per_sequence: usize,
    pub max_shapes: usize,
    /// Translation speed cap, pixels per frame. Zero freezes all motion.
    pub max_velocity: f64,
    /// Fractional semi-axis pulsation cap. Zero freezes deformation.
    pub max_pulse: f64,
    /// Static background texture amplitude.
    pub texture_sigma: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            height: 32,
            width: 64,
            num_sequences: 64,
            frames_per_sequence: 10,
            max_shapes: 3,
            max_velocity: 1.5,
            max_pulse: 0.2,
            texture_sigma: 0.02,
        }
    }
}

impl CorpusConfig {
    fn validate(&self) -> Result<()> {
        if self.frames_per_sequence < 2 {
            return Err(PhantomError::Config(format!(
                "frames_per_sequence must be >= 2, got {}",
                self.frames_per_sequence
            )));
        }
        if self.max_shapes == 0 || self.max_shapes > 3 {
            return Err(PhantomError::Config(format!(
                "max_shapes must be in 1..=3, got {}",
                self.max_shapes
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(PhantomError::Config(format!(
                "frame extents must be >= 8, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

enum ShapeKind {
    Ellipse,
    Rect,
}

/// One moving shape: linear drift plus sinusoidal size pulsation.
struct Shape {
    kind: ShapeKind,
    center0: [f64; 2],
    velocity: [f64; 2],
    semi0: [f64; 2],
    pulse: f64,
    pulse_freq: f64,
    pulse_phase: f64,
    intensity: f64,
    label: u8,
}

impl Shape {
    fn pose(&self, t: usize) -> ([f64; 2], [f64; 2]) {
        let tf = t as f64;
        let scale = 1.0
            + self.pulse
                * (2.0 * std::f64::consts::PI * (self.pulse_freq * tf + self.pulse_phase))
                    .sin();
        (
            [
                self.center0[0] + self.velocity[0] * tf,
                self.center0[1] + self.velocity[1] * tf,
            ],
            [self.semi0[0] * scale, self.semi0[1] * scale],
        )
    }

    fn covers(&self, y: f64, x: f64, t: usize) -> bool {
        let (c, s) = self.pose(t);
        match self.kind {
            ShapeKind::Ellipse => {
                let dy = (y - c[0]) / s[0];
                let dx = (x - c[1]) / s[1];
                dy * dy + dx * dx <= 1.0
            }
            ShapeKind::Rect => (y - c[0]).abs() <= s[0] && (x - c[1]).abs() <= s[1],
        }
    }
}

/// Frames plus rendered masks; masks encode shape k (1-based) at
/// intensity k/4, matching the phantom's mask rendering convention.
#[derive(Debug, Clone)]
pub struct ShapeSequence {
    pub frames: Vec<Tensor<f32>>,
    pub masks: Vec<Tensor<f32>>,
}

/// Generate `cfg.num_sequences` independent sequences. Background texture
/// is sampled once per sequence and shared by every frame, so a
/// zero-velocity, zero-pulse config yields bit-identical frames.
pub fn generate_pretrain_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Vec<ShapeSequence>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.num_sequences);
    for s in 0..cfg.num_sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(s as u64),
        );
        out.push(generate_sequence(cfg, &mut rng)?);
    }
    Ok(out)
}

fn generate_sequence(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Result<ShapeSequence> {
    let (h, w) = (cfg.height, cfg.width);
    let frames_n = cfg.frames_per_sequence;
    let n_shapes = rng.gen_range(1..=cfg.max_shapes);
    let mut shapes = Vec::with_capacity(n_shapes);
    for k in 0..n_shapes {
        let semi = [
            rng.gen_range(0.12..0.22) * h as f64,
            rng.gen_range(0.10..0.20) * w as f64,
        ];
        // Keep the full trajectory in frame: bound the start so that the
        // largest pose at the last frame still fits.
        let pulse = rng.gen_range(0.0..=cfg.max_pulse.max(1e-12)).min(cfg.max_pulse);
        let grow = 1.0 + pulse;
        let v = [
            rng.gen_range(-cfg.max_velocity..=cfg.max_velocity),
            rng.gen_range(-cfg.max_velocity..=cfg.max_velocity),
        ];
        let travel = (frames_n - 1) as f64;
        let margin_y = semi[0] * grow + 1.0;
        let margin_x = semi[1] * grow + 1.0;
        let lo_y = margin_y + (-v[0] * travel).max(0.0);
        let hi_y = h as f64 - margin_y - (v[0] * travel).max(0.0);
        let lo_x = margin_x + (-v[1] * travel).max(0.0);
        let hi_x = w as f64 - margin_x - (v[1] * travel).max(0.0);
        if lo_y >= hi_y || lo_x >= hi_x {
            return Err(PhantomError::Config(format!(
                "frame {}x{} too small for shapes at velocity {}",
                h, w, cfg.max_velocity
            )));
        }
        shapes.push(Shape {
            kind: if rng.gen_bool(0.5) {
                ShapeKind::Ellipse
            } else {
                ShapeKind::Rect
            },
            center0: [rng.gen_range(lo_y..hi_y), rng.gen_range(lo_x..hi_x)],
            velocity: v,
            semi0: semi,
            pulse,
            pulse_freq: rng.gen_range(0.05..0.25),
            pulse_phase: rng.gen_range(0.0..1.0),
            intensity: rng.gen_range(0.5..0.95),
            label: (k + 1) as u8,
        });
    }
    let background = rng.gen_range(0.0..0.08);
    let texture: Vec<f64> = if cfg.texture_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.texture_sigma)
            .map_err(|e| PhantomError::Config(format!("texture_sigma: {e}")))?;
        (0..h * w).map(|_| noise.sample(rng)).collect()
    } else {
        vec![0.0; h * w]
    };

    let mut frames = Vec::with_capacity(frames_n);
    let mut masks = Vec::with_capacity(frames_n);
    for t in 0..frames_n {
        let mut frame = Tensor::zeros(&[h, w]);
        let mut mask = Tensor::zeros(&[h, w]);
        let fd = frame.data_mut();
        let md = mask.data_mut();
        for y in 0..h {
            for x in 0..w {
                let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut core = background;
                let mut label = 0u8;
                for shape in &shapes {
                    if shape.covers(yc, xc, t) {
                        core = shape.intensity;
                        label = shape.label;
                    }
                }
                fd[y * w + x] = (core + texture[y * w + x]).clamp(0.0, 1.0) as f32;
                md[y * w + x] = label as f32 * 0.25;
            }
        }
        frames.push(frame);
        masks.push(mask);
    }
    Ok(ShapeSequence { frames, masks })
}
