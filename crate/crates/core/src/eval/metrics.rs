//! Overlap and surface-distance metrics between aligned binary volumes.
//!
//! Surfaces are the set voxels with at least one unset 6-neighbour (voxels
//! on the grid border count as surface). Distances are measured between
//! voxel centres with an exact Euclidean distance transform.

use serde::{Deserialize, Serialize};

use super::volume::{align_pair, BinaryVolume, NEIGHBORS6};
use super::EvalError;

pub const DEFAULT_NSD_TAU: f64 = 1.0;

/// Conventions used by the surface metrics, echoed in every report.
pub const HD95_CONVENTION: &str =
    "95th percentile (linear interpolation) of pooled directed surface-voxel distances in both directions";
pub const MASD_CONVENTION: &str = "mean of the two directed mean surface-voxel distances";

fn require_aligned(a: &BinaryVolume, b: &BinaryVolume) -> Result<(), EvalError> {
    if a.grid.aligned_with(&b.grid) {
        Ok(())
    } else {
        Err(EvalError::MisalignedGrids(format!(
            "{:?}/{} vs {:?}/{}",
            a.grid.dims, a.grid.spacing, b.grid.dims, b.grid.spacing
        )))
    }
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty volumes score 1.
pub fn dice(a: &BinaryVolume, b: &BinaryVolume) -> Result<f64, EvalError> {
    require_aligned(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.voxels.iter().zip(&b.voxels) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

pub fn surface_mask(vol: &BinaryVolume) -> Vec<bool> {
    let [nx, ny, nz] = vol.grid.dims;
    let mut out = vec![false; vol.voxels.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = vol.grid.index(i, j, k);
                if !vol.voxels[idx] {
                    continue;
                }
                out[idx] = NEIGHBORS6.iter().any(|&(di, dj, dk)| {
                    let (a, b, c) = (i as isize + di, j as isize + dj, k as isize + dk);
                    a < 0
                        || b < 0
                        || c < 0
                        || a >= nx as isize
                        || b >= ny as isize
                        || c >= nz as isize
                        || !vol.voxels[vol.grid.index(a as usize, b as usize, c as usize)]
                });
            }
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(q) => q,
        None => {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let parabola = |p: usize| {
            ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
        };
        let mut s = parabola(v[k]);
        while s <= z[k] {
            k -= 1;
            s = parabola(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (in voxels) from every voxel to the nearest
/// seed voxel; infinite when there are no seeds.
pub fn squared_distance_transform(seeds: &[bool], dims: [usize; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut g: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let nmax = nx.max(ny).max(nz);
    let mut f = vec![0.0; nmax];
    let mut out = vec![0.0; nmax];
    let mut v = vec![0usize; nmax];
    let mut z = vec![0.0; nmax + 1];
    let idx = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                f[i] = g[idx(i, j, k)];
            }
            edt_1d(&f[..nx], &mut out[..nx], &mut v, &mut z);
            for i in 0..nx {
                g[idx(i, j, k)] = out[i];
            }
        }
    }
    for k in 0..nz {
        for i in 0..nx {
            for j in 0..ny {
                f[j] = g[idx(i, j, k)];
            }
            edt_1d(&f[..ny], &mut out[..ny], &mut v, &mut z);
            for j in 0..ny {
                g[idx(i, j, k)] = out[j];
            }
        }
    }
    for j in 0..ny {
        for i in 0..nx {
            for k in 0..nz {
                f[k] = g[idx(i, j, k)];
            }
            edt_1d(&f[..nz], &mut out[..nz], &mut v, &mut z);
            for k in 0..nz {
                g[idx(i, j, k)] = out[k];
            }
        }
    }
    g
}

/// Directed distances (mm) from each surface voxel of `a` to the surface of `b`.
pub fn directed_surface_distances(a: &BinaryVolume, b: &BinaryVolume) -> Result<Vec<f64>, EvalError> {
    require_aligned(a, b)?;
    let sa = surface_mask(a);
    let sb = surface_mask(b);
    if !sa.iter().any(|&x| x) || !sb.iter().any(|&x| x) {
        return Err(EvalError::EmptySurface);
    }
    let d2 = squared_distance_transform(&sb, b.grid.dims);
    Ok(sa
        .iter()
        .zip(&d2)
        .filter(|(&s, _)| s)
        .map(|(_, &d)| d.sqrt() * a.grid.spacing)
        .collect())
}

fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

pub fn hd95(a: &BinaryVolume, b: &BinaryVolume) -> Result<f64, EvalError> {
    let mut pooled = directed_surface_distances(a, b)?;
    pooled.extend(directed_surface_distances(b, a)?);
    Ok(percentile(&mut pooled, 95.0))
}

pub fn masd(a: &BinaryVolume, b: &BinaryVolume) -> Result<f64, EvalError> {
    let ab = directed_surface_distances(a, b)?;
    let ba = directed_surface_distances(b, a)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(&ab) + mean(&ba)))
}

/// Fraction of surface voxels (both directions) within `tau` mm of the other surface.
pub fn nsd(a: &BinaryVolume, b: &BinaryVolume, tau: f64) -> Result<f64, EvalError> {
    let ab = directed_surface_distances(a, b)?;
    let ba = directed_surface_distances(b, a)?;
    let within = ab.iter().chain(&ba).filter(|&&d| d <= tau).count();
    Ok(within as f64 / (ab.len() + ba.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub nsd: f64,
    pub nsd_tau_mm: f64,
    pub hd95_mm: f64,
    pub masd_mm: f64,
    pub spacing_mm: f64,
    pub hd95_convention: String,
    pub masd_convention: String,
}

/// All metrics after bringing both volumes onto a common grid.
pub fn compare_volumes(a: &BinaryVolume, b: &BinaryVolume, tau: f64) -> Result<MetricReport, EvalError> {
    let (a, b) = align_pair(a, b)?;
    Ok(MetricReport {
        dice: dice(&a, &b)?,
        nsd: nsd(&a, &b, tau)?,
        nsd_tau_mm: tau,
        hd95_mm: hd95(&a, &b)?,
        masd_mm: masd(&a, &b)?,
        spacing_mm: a.spacing(),
        hd95_convention: HD95_CONVENTION.into(),
        masd_convention: MASD_CONVENTION.into(),
    })
}
