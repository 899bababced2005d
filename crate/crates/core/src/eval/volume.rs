//! Binary voxel volumes, solid voxelization and NRRD input/output.
//!
//! Voxel `(i, j, k)` covers the cube with minimum corner
//! `origin + (i, j, k) * spacing`; its centre is half a voxel further in.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::geometry::Vec3;
use crate::mesh::TriangleMesh;

pub const MIN_SPACING: f64 = 0.25;
pub const MAX_SPACING: f64 = 5.0;

/// How a volume was produced; written into volume metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VoxelMethod {
    /// Voxel centres inside a closed, outward-oriented mesh (winding > 0).
    MeshFill,
    /// Union of balls around points with enclosed cavities filled.
    BallUnionFill,
    Resampled,
    Unknown,
}

impl fmt::Display for VoxelMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VoxelMethod::MeshFill => "mesh-fill",
            VoxelMethod::BallUnionFill => "ball-union-fill",
            VoxelMethod::Resampled => "resampled",
            VoxelMethod::Unknown => "unknown",
        })
    }
}

impl std::str::FromStr for VoxelMethod {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "mesh-fill" => VoxelMethod::MeshFill,
            "ball-union-fill" => VoxelMethod::BallUnionFill,
            "resampled" => VoxelMethod::Resampled,
            _ => VoxelMethod::Unknown,
        })
    }
}

/// Regular isotropic grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: f64,
    pub origin: Vec3,
}

impl Grid {
    /// Grid whose origin is snapped to a multiple of `spacing`, covering
    /// `[min, max]` plus `pad` voxels on every side. Grids built this way
    /// with the same spacing are mutually aligned.
    pub fn covering(min: Vec3, max: Vec3, spacing: f64, pad: usize) -> Self {
        let p = pad as f64;
        let origin = min.map(|v| ((v / spacing).floor() - p) * spacing);
        let dims = [0, 1, 2].map(|a| (((max[a] - origin[a]) / spacing).ceil() + p).max(1.0) as usize);
        Self {
            dims,
            spacing,
            origin,
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.spacing
    }

    /// Union of two grids with equal spacing and aligned origins.
    pub fn union(&self, other: &Grid) -> Grid {
        let s = self.spacing;
        let max = |g: &Grid| g.origin + Vec3::new(g.dims[0] as f64, g.dims[1] as f64, g.dims[2] as f64) * s;
        let lo = self.origin.inf(&other.origin);
        let hi = max(self).sup(&max(other));
        let dims = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / s).round() as usize);
        Grid {
            dims,
            spacing: s,
            origin: lo,
        }
    }

    pub fn aligned_with(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && (self.spacing - other.spacing).abs() <= 1e-9 * self.spacing
            && (self.origin - other.origin).amax() <= 1e-6 * self.spacing.max(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryVolume {
    pub grid: Grid,
    /// Indexed by [`Grid::index`] (x fastest).
    pub voxels: Vec<bool>,
    pub method: VoxelMethod,
}

impl BinaryVolume {
    pub fn empty(grid: Grid) -> Self {
        Self {
            grid,
            voxels: vec![false; grid.len()],
            method: VoxelMethod::Unknown,
        }
    }

    pub fn spacing(&self) -> f64 {
        self.grid.spacing
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.voxels[self.grid.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let idx = self.grid.index(i, j, k);
        self.voxels[idx] = v;
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn volume_mm3(&self) -> f64 {
        self.count() as f64 * self.grid.spacing.powi(3)
    }

    /// Value at an arbitrary world position (false outside the grid).
    pub fn sample(&self, p: &Vec3) -> bool {
        let rel = (p - self.grid.origin) / self.grid.spacing;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = rel[a].floor();
            if f < 0.0 || f >= self.grid.dims[a] as f64 {
                return false;
            }
            idx[a] = f as usize;
        }
        self.get(idx[0], idx[1], idx[2])
    }

    /// Rigidly transformed copy in a new (aligned) grid, by nearest-centre
    /// sampling of the inverse-mapped voxel centres.
    pub fn transformed(&self, transform: &crate::geometry::RigidTransform) -> BinaryVolume {
        let g = self.grid;
        let ext = Vec3::new(g.dims[0] as f64, g.dims[1] as f64, g.dims[2] as f64) * g.spacing;
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for c in 0..8 {
            let corner = g.origin + Vec3::new(
                if c & 1 == 0 { 0.0 } else { ext.x },
                if c & 2 == 0 { 0.0 } else { ext.y },
                if c & 4 == 0 { 0.0 } else { ext.z },
            );
            let p = transform.apply(&corner);
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        let target = Grid::covering(lo, hi, g.spacing, 1);
        let inv = transform.inverse();
        let mut out = BinaryVolume::empty(target);
        for k in 0..target.dims[2] {
            for j in 0..target.dims[1] {
                for i in 0..target.dims[0] {
                    if self.sample(&inv.apply(&target.center(i, j, k))) {
                        out.set(i, j, k, true);
                    }
                }
            }
        }
        out.method = VoxelMethod::Resampled;
        out
    }
}

fn check_spacing(spacing: f64) -> Result<(), EvalError> {
    if !(MIN_SPACING..=MAX_SPACING).contains(&spacing) {
        return Err(EvalError::InvalidSpacing(spacing));
    }
    Ok(())
}

/// Solid voxelization of a closed mesh on a grid covering its bounds.
pub fn voxelize_mesh(mesh: &TriangleMesh, spacing: f64) -> Result<BinaryVolume, EvalError> {
    check_spacing(spacing)?;
    let (lo, hi) = mesh.bounds().ok_or(EvalError::EmptyInput)?;
    let vol = voxelize_mesh_on(mesh, &Grid::covering(lo, hi, spacing, 1));
    if vol.count() == 0 {
        return Err(EvalError::ZeroVolume);
    }
    Ok(vol)
}

/// Marks every voxel whose centre lies inside the mesh, casting one line
/// per `(i, j)` column along +z.
pub fn voxelize_mesh_on(mesh: &TriangleMesh, grid: &Grid) -> BinaryVolume {
    let mut vol = BinaryVolume::empty(*grid);
    vol.method = VoxelMethod::MeshFill;
    let [nx, ny, nz] = grid.dims;
    if mesh.is_empty() || vol.voxels.is_empty() {
        return vol;
    }
    let s = grid.spacing;
    // Bin faces by the columns their xy bounding box touches (one column margin).
    let mut columns: Vec<Vec<usize>> = vec![Vec::new(); nx * ny];
    for (fi, f) in mesh.faces.iter().enumerate() {
        let pts = f.map(|i| mesh.vertices[i]);
        let lo = pts[0].inf(&pts[1]).inf(&pts[2]);
        let hi = pts[0].sup(&pts[1]).sup(&pts[2]);
        let range = |a: usize| {
            let l = ((lo[a] - grid.origin[a]) / s - 1.5).floor().max(0.0) as usize;
            let h = ((hi[a] - grid.origin[a]) / s + 0.5).ceil().max(0.0) as usize;
            (l, h.min(grid.dims[a].saturating_sub(1)))
        };
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for j in y0..=y1 {
            for i in x0..=x1 {
                columns[i + nx * j].push(fi);
            }
        }
    }
    let dir = Vec3::z();
    let z0 = grid.origin.z - s;
    for j in 0..ny {
        for i in 0..nx {
            let cand = &columns[i + nx * j];
            if cand.is_empty() {
                continue;
            }
            let c = grid.center(i, j, 0);
            let origin = Vec3::new(c.x, c.y, z0);
            let crossings = mesh.line_crossings_among(&origin, &dir, Some(cand));
            for (t0, t1) in crate::mesh::intervals_from_crossings(&crossings) {
                // centre z_k = z0 + s * (k + 1.5)
                let k0 = ((t0 / s) - 1.5).ceil().max(0.0) as usize;
                let k1 = ((t1 / s) - 1.5).floor();
                if k1 < 0.0 {
                    continue;
                }
                for k in k0..=(k1 as usize).min(nz - 1) {
                    vol.set(i, j, k, true);
                }
            }
        }
    }
    vol
}

fn mean_nearest_neighbor(points: &[Vec3]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let total: f64 = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / points.len() as f64
}

/// Solid voxelization of a bare point cloud: union of balls of `radius`
/// (default 1.5x the mean nearest-neighbour distance) with enclosed
/// cavities filled.
pub fn voxelize_points(points: &[Vec3], spacing: f64, radius: Option<f64>) -> Result<BinaryVolume, EvalError> {
    check_spacing(spacing)?;
    if points.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let r = radius.unwrap_or_else(|| 1.5 * mean_nearest_neighbor(points)).max(0.5 * spacing);
    let lo = points.iter().fold(Vec3::repeat(f64::INFINITY), |a, p| a.inf(p));
    let hi = points.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
    let pad = (r / spacing).ceil() as usize + 2;
    let grid = Grid::covering(lo, hi, spacing, pad);
    let mut vol = BinaryVolume::empty(grid);
    let reach = (r / spacing).ceil() as isize + 1;
    for p in points {
        let rel = (p - grid.origin) / spacing;
        let base = [0, 1, 2].map(|a| rel[a].floor() as isize);
        for dk in -reach..=reach {
            for dj in -reach..=reach {
                for di in -reach..=reach {
                    let (i, j, k) = (base[0] + di, base[1] + dj, base[2] + dk);
                    if i < 0 || j < 0 || k < 0 {
                        continue;
                    }
                    let (i, j, k) = (i as usize, j as usize, k as usize);
                    if i >= grid.dims[0] || j >= grid.dims[1] || k >= grid.dims[2] {
                        continue;
                    }
                    if (grid.center(i, j, k) - p).norm_squared() <= r * r {
                        vol.set(i, j, k, true);
                    }
                }
            }
        }
    }
    fill_cavities(&mut vol);
    vol.method = VoxelMethod::BallUnionFill;
    if vol.count() == 0 {
        return Err(EvalError::ZeroVolume);
    }
    Ok(vol)
}

/// Sets every unset voxel not 6-connected to the grid border.
pub fn fill_cavities(vol: &mut BinaryVolume) {
    let [nx, ny, nz] = vol.grid.dims;
    let mut outside = vec![false; vol.voxels.len()];
    let mut queue = VecDeque::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let border = i == 0 || j == 0 || k == 0 || i + 1 == nx || j + 1 == ny || k + 1 == nz;
                let idx = vol.grid.index(i, j, k);
                if border && !vol.voxels[idx] {
                    outside[idx] = true;
                    queue.push_back((i, j, k));
                }
            }
        }
    }
    while let Some((i, j, k)) = queue.pop_front() {
        for (di, dj, dk) in NEIGHBORS6 {
            let (a, b, c) = (i as isize + di, j as isize + dj, k as isize + dk);
            if a < 0 || b < 0 || c < 0 || a >= nx as isize || b >= ny as isize || c >= nz as isize {
                continue;
            }
            let idx = vol.grid.index(a as usize, b as usize, c as usize);
            if !vol.voxels[idx] && !outside[idx] {
                outside[idx] = true;
                queue.push_back((a as usize, b as usize, c as usize));
            }
        }
    }
    for (v, o) in vol.voxels.iter_mut().zip(outside) {
        if !o {
            *v = true;
        }
    }
}

pub(crate) const NEIGHBORS6: [(isize, isize, isize); 6] = [
    (-1, 0, 0),
    (1, 0, 0),
    (0, -1, 0),
    (0, 1, 0),
    (0, 0, -1),
    (0, 0, 1),
];

/// Nearest-neighbour resampling onto `target` (must share the spacing).
pub fn resample_nearest(vol: &BinaryVolume, target: &Grid) -> BinaryVolume {
    let mut out = BinaryVolume::empty(*target);
    for k in 0..target.dims[2] {
        for j in 0..target.dims[1] {
            for i in 0..target.dims[0] {
                if vol.sample(&target.center(i, j, k)) {
                    out.set(i, j, k, true);
                }
            }
        }
    }
    out.method = VoxelMethod::Resampled;
    out
}

/// Brings two volumes onto their common union grid.
pub fn align_pair(a: &BinaryVolume, b: &BinaryVolume) -> Result<(BinaryVolume, BinaryVolume), EvalError> {
    if a.grid.aligned_with(&b.grid) {
        return Ok((a.clone(), b.clone()));
    }
    if (a.spacing() - b.spacing()).abs() > 1e-9 * a.spacing() {
        return Err(EvalError::MisalignedGrids("spacings differ".into()));
    }
    let off = (b.grid.origin - a.grid.origin) / a.spacing();
    if off.iter().any(|v| (v - v.round()).abs() > 1e-6) {
        return Err(EvalError::MisalignedGrids("origins are not on a common lattice".into()));
    }
    let g = a.grid.union(&b.grid);
    let keep = |v: &BinaryVolume| {
        let mut r = resample_nearest(v, &g);
        r.method = v.method;
        r
    };
    Ok((keep(a), keep(b)))
}

/// Writes an NRRD file with an attached raw `uint8` payload (0/1 values).
/// `space origin` is the centre of voxel (0, 0, 0).
pub fn write_nrrd(path: &Path, vol: &BinaryVolume) -> Result<(), EvalError> {
    let g = &vol.grid;
    let c0 = g.center(0, 0, 0);
    let s = g.spacing;
    let mut out = Vec::new();
    write!(
        out,
        "NRRD0004\n# voxelization: {}\ntype: uint8\ndimension: 3\nspace dimension: 3\nsizes: {} {} {}\n\
         space directions: ({s:e},0,0) (0,{s:e},0) (0,0,{s:e})\nspace origin: ({:e},{:e},{:e})\nencoding: raw\n\n",
        vol.method, g.dims[0], g.dims[1], g.dims[2], c0.x, c0.y, c0.z
    )
    .expect("write to memory");
    out.extend(vol.voxels.iter().map(|&v| v as u8));
    fs::write(path, out).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))
}

fn parse_tuple(s: &str) -> Option<Vec<f64>> {
    s.trim()
        .trim_start_matches('(')
        .trim_end_matches(')')
        .split(',')
        .map(|v| v.trim().parse().ok())
        .collect()
}

/// Reads volumes written by [`write_nrrd`] (raw uint8, axis-aligned isotropic).
pub fn read_nrrd(path: &Path) -> Result<BinaryVolume, EvalError> {
    let bytes = fs::read(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    let bad = |m: &str| EvalError::Format(format!("{}: {m}", path.display()));
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| bad("missing header terminator"))?;
    let header = String::from_utf8_lossy(&bytes[..split]);
    let data = &bytes[split + 2..];
    let mut lines = header.lines();
    if !lines.next().unwrap_or("").starts_with("NRRD") {
        return Err(bad("missing NRRD magic"));
    }
    let mut dims = None;
    let mut spacing = None;
    let mut center = None;
    let mut method = VoxelMethod::Unknown;
    for line in lines {
        if let Some(m) = line.strip_prefix("# voxelization:") {
            method = m.trim().parse().unwrap_or(VoxelMethod::Unknown);
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            continue;
        };
        match key.trim() {
            "type" if value.trim() != "uint8" => return Err(bad("only uint8 volumes are supported")),
            "encoding" if value.trim() != "raw" => return Err(bad("only raw encoding is supported")),
            "sizes" => {
                let v: Option<Vec<usize>> = value.split_whitespace().map(|t| t.parse().ok()).collect();
                dims = v.filter(|v| v.len() == 3).map(|v| [v[0], v[1], v[2]]);
            }
            "space directions" => {
                let vecs: Vec<Vec<f64>> = value.split_whitespace().filter_map(parse_tuple).collect();
                if vecs.len() == 3 {
                    spacing = Some(vecs[0][0]);
                }
            }
            "spacings" => spacing = value.split_whitespace().next().and_then(|t| t.parse().ok()),
            "space origin" => center = parse_tuple(value).filter(|v| v.len() == 3),
            _ => {}
        }
    }
    let dims = dims.ok_or_else(|| bad("missing sizes"))?;
    let spacing: f64 = spacing.ok_or_else(|| bad("missing spacing"))?;
    let c = center.unwrap_or_else(|| vec![0.5 * spacing; 3]);
    let grid = Grid {
        dims,
        spacing,
        origin: Vec3::new(c[0], c[1], c[2]) - Vec3::repeat(0.5 * spacing),
    };
    if data.len() < grid.len() {
        return Err(bad("truncated voxel data"));
    }
    Ok(BinaryVolume {
        grid,
        voxels: data[..grid.len()].iter().map(|&b| b != 0).collect(),
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{box_mesh, uv_sphere};

    #[test]
    fn cube_of_volume_eight_at_half_millimetre() {
        let m = box_mesh(Vec3::repeat(-1.0), Vec3::repeat(1.0));
        let v = voxelize_mesh(&m, 0.5).unwrap();
        let expected = 8.0 / 0.125;
        assert!((v.count() as f64 - expected).abs() <= 0.05 * expected, "{}", v.count());
        assert_eq!(v.method, VoxelMethod::MeshFill);
    }

    #[test]
    fn sphere_volume_within_five_percent() {
        let m = uv_sphere(Vec3::new(0.3, -0.2, 0.1), 10.0, 48, 96);
        let v = voxelize_mesh(&m, 1.0).unwrap();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 1000.0;
        assert!((v.volume_mm3() - exact).abs() < 0.05 * exact, "{}", v.volume_mm3());
    }

    #[test]
    fn empty_input_is_an_error() {
        let m = TriangleMesh::default();
        assert!(matches!(voxelize_mesh(&m, 1.0), Err(EvalError::EmptyInput)));
        assert!(matches!(voxelize_points(&[], 1.0, None), Err(EvalError::EmptyInput)));
        assert!(matches!(voxelize_mesh(&box_mesh(Vec3::zeros(), Vec3::repeat(1.0)), 0.1), Err(EvalError::InvalidSpacing(_))));
    }

    #[test]
    fn point_cloud_of_a_solid_ball_fills_it() {
        let mut pts = Vec::new();
        for i in -8..=8 {
            for j in -8..=8 {
                for k in -8..=8 {
                    let p = Vec3::new(i as f64, j as f64, k as f64);
                    if p.norm() <= 8.0 {
                        pts.push(p);
                    }
                }
            }
        }
        let v = voxelize_points(&pts, 1.0, Some(1.0)).unwrap();
        assert_eq!(v.method, VoxelMethod::BallUnionFill);
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 9.0f64.powi(3);
        assert!((v.volume_mm3() - exact).abs() < 0.15 * exact, "{}", v.volume_mm3());
    }

    #[test]
    fn hollow_shell_gets_filled() {
        let mut vol = BinaryVolume::empty(Grid::covering(Vec3::zeros(), Vec3::repeat(5.0), 1.0, 0));
        for k in 0..5 {
            for j in 0..5 {
                for i in 0..5 {
                    let edge = [i, j, k].iter().any(|&c| c == 0 || c == 4);
                    vol.set(i, j, k, edge);
                }
            }
        }
        fill_cavities(&mut vol);
        assert_eq!(vol.count(), 125);
    }

    #[test]
    fn nrrd_round_trip() {
        let m = uv_sphere(Vec3::new(1.0, 2.0, 3.0), 4.0, 12, 24);
        let v = voxelize_mesh(&m, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nrrd");
        write_nrrd(&p, &v).unwrap();
        let back = read_nrrd(&p).unwrap();
        assert_eq!(back.voxels, v.voxels);
        assert!(back.grid.aligned_with(&v.grid));
        assert_eq!(back.method, VoxelMethod::MeshFill);
    }

    #[test]
    fn aligned_grids_union() {
        let a = voxelize_mesh(&box_mesh(Vec3::zeros(), Vec3::repeat(2.0)), 0.5).unwrap();
        let b = voxelize_mesh(&box_mesh(Vec3::repeat(1.0), Vec3::repeat(4.0)), 0.5).unwrap();
        let (a2, b2) = align_pair(&a, &b).unwrap();
        assert!(a2.grid.aligned_with(&b2.grid));
        assert_eq!(a2.count(), a.count());
        assert_eq!(b2.count(), b.count());
    }
}
