//! Exact anisotropic Euclidean distance transform (separable
//! lower-envelope-of-parabolas method), squared distances in mm².

use crate::grid::Grid3;

/// 1D squared-distance transform with sample spacing `sqrt(w2)`:
/// `d[i] = min_j(w2·(i−j)² + f[j])`. `f` entries may be +∞ (no site).
fn dt1d(f: &[f64], w2: f64, d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !started {
            started = true;
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        }
        // Pop parabolas the new one overtakes; z[0] = −∞ bounds the loop.
        loop {
            let p = v[k];
            let s = ((f[q] + w2 * (q * q) as f64) - (f[p] + w2 * (p * p) as f64))
                / (2.0 * w2 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    if !started {
        d[..n].fill(f64::INFINITY);
        return;
    }
    let mut k2 = 0usize;
    for i in 0..n {
        while z[k2 + 1] < i as f64 {
            k2 += 1;
        }
        let j = v[k2];
        let di = i as f64 - j as f64;
        d[i] = w2 * di * di + f[j];
    }
}

/// Per-voxel squared mm-distance to the nearest `true` voxel center.
/// `spacing` is (z, y, x) mm. Voxels with no reachable site get +∞
/// (only when `sites` is entirely false).
pub fn edt_sq(sites: &Grid3<bool>, spacing: [f64; 3]) -> Grid3<f64> {
    let [nz, ny, nx] = sites.dims();
    let mut dist = Grid3::filled([nz, ny, nx], f64::INFINITY);
    for (o, &s) in dist.data_mut().iter_mut().zip(sites.data()) {
        if s {
            *o = 0.0;
        }
    }
    let nmax = nx.max(ny).max(nz);
    let mut f = vec![0.0f64; nmax];
    let mut d = vec![0.0f64; nmax];
    let mut v = vec![0usize; nmax];
    let mut z = vec![0.0f64; nmax + 1];
    // X pass.
    let w2 = spacing[2] * spacing[2];
    for zi in 0..nz {
        for yi in 0..ny {
            let base = (zi * ny + yi) * nx;
            f[..nx].copy_from_slice(&dist.data()[base..base + nx]);
            dt1d(&f[..nx], w2, &mut d[..nx], &mut v, &mut z);
            dist.data_mut()[base..base + nx].copy_from_slice(&d[..nx]);
        }
    }
    // Y pass.
    let w2 = spacing[1] * spacing[1];
    for zi in 0..nz {
        for xi in 0..nx {
            for yi in 0..ny {
                f[yi] = *dist.get(zi, yi, xi);
            }
            dt1d(&f[..ny], w2, &mut d[..ny], &mut v, &mut z);
            for yi in 0..ny {
                dist.set(zi, yi, xi, d[yi]);
            }
        }
    }
    // Z pass.
    let w2 = spacing[0] * spacing[0];
    for yi in 0..ny {
        for xi in 0..nx {
            for zi in 0..nz {
                f[zi] = *dist.get(zi, yi, xi);
            }
            dt1d(&f[..nz], w2, &mut d[..nz], &mut v, &mut z);
            for zi in 0..nz {
                dist.set(zi, yi, xi, d[zi]);
            }
        }
    }
    dist
}
