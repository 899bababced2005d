//! Path-length radiographs by exact ray casting through meshes or voxel
//! volumes. Independent of the splat renderer: each pixel holds
//! `density * (length in mm of the pixel-centre ray inside the object)`.

use super::volume::BinaryVolume;
use super::EvalError;
use crate::geometry::{CameraView, Ray, Vec2, Vec3};
use crate::image::Image;
use crate::mesh::{intervals_from_crossings, TriangleMesh};

#[derive(Debug, Clone, Copy)]
pub enum DrrObject<'a> {
    Mesh(&'a TriangleMesh),
    Volume(&'a BinaryVolume),
}

pub fn raycast_drr(object: DrrObject<'_>, cam: &CameraView, density: f64) -> Result<Image, EvalError> {
    cam.validate()?;
    let mut img = match object {
        DrrObject::Mesh(m) => mesh_drr(m, cam),
        DrrObject::Volume(v) => volume_drr(v, cam),
    };
    if density != 1.0 {
        img.data.iter_mut().for_each(|p| *p *= density);
    }
    Ok(img)
}

fn mesh_drr(mesh: &TriangleMesh, cam: &CameraView) -> Image {
    let (w, h) = (cam.width, cam.height);
    let mut img = Image::zeros(w, h);
    // Per-pixel candidate faces from each face's projected bounding box.
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); w * h];
    let mut everywhere = Vec::new();
    for (fi, f) in mesh.faces.iter().enumerate() {
        let proj: Option<Vec<Vec2>> = f.iter().map(|&i| cam.project(&mesh.vertices[i]).ok()).collect();
        let Some(proj) = proj else {
            everywhere.push(fi);
            continue;
        };
        let (mut lo, mut hi) = (proj[0], proj[0]);
        for p in &proj[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let x0 = (lo.x - 1.0).floor().max(0.0) as usize;
        let y0 = (lo.y - 1.0).floor().max(0.0) as usize;
        if hi.x < -1.0 || hi.y < -1.0 {
            continue;
        }
        let x1 = ((hi.x + 1.0).ceil() as usize).min(w - 1);
        let y1 = ((hi.y + 1.0).ceil() as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                bins[y * w + x].push(fi);
            }
        }
    }
    let mut cand = Vec::new();
    for y in 0..h {
        for x in 0..w {
            cand.clear();
            cand.extend_from_slice(&bins[y * w + x]);
            if !everywhere.is_empty() {
                cand.extend_from_slice(&everywhere);
                cand.sort_unstable();
            }
            if cand.is_empty() {
                continue;
            }
            let ray = cam.back_project(&Vec2::new(x as f64, y as f64));
            let crossings = mesh.line_crossings_among(&ray.origin, &ray.direction, Some(&cand));
            let len: f64 = intervals_from_crossings(&crossings)
                .into_iter()
                .map(|(a, b)| (b.max(0.0) - a.max(0.0)).max(0.0))
                .sum();
            img.set(x, y, len);
        }
    }
    img
}

/// Exact length of `ray` (unit direction) inside set voxels, by voxel traversal.
pub fn ray_volume_length(vol: &BinaryVolume, ray: &Ray) -> f64 {
    let g = &vol.grid;
    let s = g.spacing;
    let hi = g.origin + Vec3::new(g.dims[0] as f64, g.dims[1] as f64, g.dims[2] as f64) * s;
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        let d = ray.direction[a];
        if d.abs() < 1e-300 {
            if ray.origin[a] < g.origin[a] || ray.origin[a] > hi[a] {
                return 0.0;
            }
            continue;
        }
        let ta = (g.origin[a] - ray.origin[a]) / d;
        let tb = (hi[a] - ray.origin[a]) / d;
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    if t0 >= t1 {
        return 0.0;
    }
    let start = ray.at(t0 + 1e-12 * s);
    let mut idx = [0isize; 3];
    let mut step = [0isize; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let c = (((start[a] - g.origin[a]) / s).floor() as isize).clamp(0, g.dims[a] as isize - 1);
        idx[a] = c;
        let d = ray.direction[a];
        if d > 0.0 {
            step[a] = 1;
            t_max[a] = (g.origin[a] + (c + 1) as f64 * s - ray.origin[a]) / d;
            t_delta[a] = s / d;
        } else if d < 0.0 {
            step[a] = -1;
            t_max[a] = (g.origin[a] + c as f64 * s - ray.origin[a]) / d;
            t_delta[a] = -s / d;
        }
    }
    let mut t = t0;
    let mut total = 0.0;
    loop {
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        let t_next = t_max[a].min(t1);
        if vol.get(idx[0] as usize, idx[1] as usize, idx[2] as usize) {
            total += t_next - t;
        }
        if t_next >= t1 {
            break;
        }
        t = t_next;
        idx[a] += step[a];
        if idx[a] < 0 || idx[a] >= g.dims[a] as isize {
            break;
        }
        t_max[a] += t_delta[a];
    }
    total
}

fn volume_drr(vol: &BinaryVolume, cam: &CameraView) -> Image {
    let mut img = Image::zeros(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let ray = cam.back_project(&Vec2::new(x as f64, y as f64));
            img.set(x, y, ray_volume_length(vol, &ray));
        }
    }
    img
}
