//! Boundary extraction and directed surface distances in millimetres.

use super::edt::edt_sq;
use super::{MetricError, Result};
use crate::grid::Grid3;

/// Foreground voxels with at least one background 6-neighbour;
/// out-of-grid counts as background.
pub fn boundary_voxels(mask: &Grid3<bool>) -> Vec<[usize; 3]> {
    let [nz, ny, nx] = mask.dims();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !*mask.get(z, y, x) {
                    continue;
                }
                let exposed = (z == 0 || !*mask.get(z - 1, y, x))
                    || (z + 1 == nz || !*mask.get(z + 1, y, x))
                    || (y == 0 || !*mask.get(z, y - 1, x))
                    || (y + 1 == ny || !*mask.get(z, y + 1, x))
                    || (x == 0 || !*mask.get(z, y, x - 1))
                    || (x + 1 == nx || !*mask.get(z, y, x + 1));
                if exposed {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Directed boundary-to-boundary distances, mm.
#[derive(Debug, Clone)]
pub struct SurfaceDistanceSet {
    pub a_to_b: Vec<f64>,
    pub b_to_a: Vec<f64>,
}

impl SurfaceDistanceSet {
    /// Both directed sets pooled, ascending.
    pub fn pooled_sorted(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self
            .a_to_b
            .iter()
            .chain(self.b_to_a.iter())
            .copied()
            .collect();
        all.sort_by(|p, q| p.partial_cmp(q).expect("finite distances"));
        all
    }
}

/// Distances are undefined when either mask has no foreground.
#[derive(Debug, Clone)]
pub enum SurfaceOutcome {
    Distances(SurfaceDistanceSet),
    EmptyMask { a_empty: bool, b_empty: bool },
}

fn check_dims(a: &Grid3<bool>, b: &Grid3<bool>, spacing: [f64; 3]) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(MetricError::ExtentMismatch {
            lhs: a.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    if spacing.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
        return Err(MetricError::BadSpacing(spacing));
    }
    Ok(())
}

/// Surface distances via the exact anisotropic distance transform.
pub fn surface_distances(
    a: &Grid3<bool>,
    b: &Grid3<bool>,
    spacing: [f64; 3],
) -> Result<SurfaceOutcome> {
    check_dims(a, b, spacing)?;
    let ba = boundary_voxels(a);
    let bb = boundary_voxels(b);
    if ba.is_empty() || bb.is_empty() {
        return Ok(SurfaceOutcome::EmptyMask {
            a_empty: ba.is_empty(),
            b_empty: bb.is_empty(),
        });
    }
    let mut site_b = Grid3::filled(a.dims(), false);
    for &[z, y, x] in &bb {
        site_b.set(z, y, x, true);
    }
    let dist_to_b = edt_sq(&site_b, spacing);
    let a_to_b: Vec<f64> = ba
        .iter()
        .map(|&[z, y, x]| dist_to_b.get(z, y, x).sqrt())
        .collect();
    let mut site_a = Grid3::filled(a.dims(), false);
    for &[z, y, x] in &ba {
        site_a.set(z, y, x, true);
    }
    let dist_to_a = edt_sq(&site_a, spacing);
    let b_to_a: Vec<f64> = bb
        .iter()
        .map(|&[z, y, x]| dist_to_a.get(z, y, x).sqrt())
        .collect();
    Ok(SurfaceOutcome::Distances(SurfaceDistanceSet {
        a_to_b,
        b_to_a,
    }))
}

/// O(|A|·|B|) pairwise oracle with the identical boundary and pooling
/// rules; the transform route must match it to 1e-9.
pub fn surface_distances_bruteforce(
    a: &Grid3<bool>,
    b: &Grid3<bool>,
    spacing: [f64; 3],
) -> Result<SurfaceOutcome> {
    check_dims(a, b, spacing)?;
    let ba = boundary_voxels(a);
    let bb = boundary_voxels(b);
    if ba.is_empty() || bb.is_empty() {
        return Ok(SurfaceOutcome::EmptyMask {
            a_empty: ba.is_empty(),
            b_empty: bb.is_empty(),
        });
    }
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> Vec<f64> {
        from.iter()
            .map(|&[z1, y1, x1]| {
                let mut best = f64::INFINITY;
                for &[z2, y2, x2] in to {
                    let dz = (z1 as f64 - z2 as f64) * spacing[0];
                    let dy = (y1 as f64 - y2 as f64) * spacing[1];
                    let dx = (x1 as f64 - x2 as f64) * spacing[2];
                    let sq = dz * dz + dy * dy + dx * dx;
                    if sq < best {
                        best = sq;
                    }
                }
                best.sqrt()
            })
            .collect()
    };
    Ok(SurfaceOutcome::Distances(SurfaceDistanceSet {
        a_to_b: directed(&ba, &bb),
        b_to_a: directed(&bb, &ba),
    }))
}

/// Linear interpolation at rank `q·(n−1)` on an ascending slice.
pub fn percentile_linear(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty set");
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = rank - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Mean and 95th percentile of the pooled directed distances.
pub fn msd_hd95(set: &SurfaceDistanceSet) -> (f64, f64) {
    let pooled = set.pooled_sorted();
    let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
    (mean, percentile_linear(&pooled, 0.95))
}

/// Maximum pooled distance (classic Hausdorff).
pub fn hd_max(set: &SurfaceDistanceSet) -> f64 {
    set.pooled_sorted().last().copied().unwrap_or(0.0)
}
