//! Closed triangle meshes with signed ray crossings.
//!
//! A mesh may be the union of several overlapping closed, outward-oriented
//! components. Inside/outside is decided by the winding number along a ray
//! (sum of signed crossings), so overlapping parts are handled without any
//! boolean mesh operations.

use crate::geometry::{RigidTransform, Vec3};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

/// One ray/triangle crossing: parameter along the ray and winding change
/// (+1 entering, -1 leaving).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing {
    pub t: f64,
    pub winding: i32,
}

// Irrational-ish offsets used to nudge rays off triangle edges.
const NUDGES: [(f64, f64); 8] = [
    (0.7548776662, 0.5698402910),
    (-0.3819660113, 0.8191725134),
    (0.2360679775, -0.6180339887),
    (-0.8660254038, -0.2679491924),
    (0.4142135624, 0.7320508076),
    (-0.5857864376, 0.3166247904),
    (0.9128709292, -0.4472135955),
    (-0.1715728753, -0.9045340337),
];

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Self {
        Self { vertices, faces }
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Axis-aligned bounds of the vertices referenced by faces.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let mut it = self.faces.iter().flatten().map(|&i| self.vertices[i]);
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), p| (lo.inf(&p), hi.sup(&p))))
    }

    pub fn transformed(&self, transform: &RigidTransform) -> Self {
        Self {
            vertices: self.vertices.iter().map(|p| transform.apply(p)).collect(),
            faces: self.faces.clone(),
        }
    }

    /// Signed enclosed volume (positive for outward-oriented closed meshes).
    /// Overlapping components are counted once per component.
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i]);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    /// Crossings of the infinite line `origin + t dir`, sorted by `t`, or
    /// `None` when the line grazes an edge or vertex.
    fn crossings_exact(&self, origin: &Vec3, dir: &Vec3, candidates: Option<&[usize]>) -> Option<Vec<Crossing>> {
        let mut out = Vec::new();
        let mut test = |fi: usize| -> bool {
            let [a, b, c] = self.faces[fi].map(|i| self.vertices[i]);
            let e1 = b - a;
            let e2 = c - a;
            let p = dir.cross(&e2);
            let det = e1.dot(&p);
            let scale = e1.norm() * e2.norm() * dir.norm();
            if det.abs() <= 1e-14 * scale {
                // Line parallel to the triangle plane: only a problem if it lies in it.
                let n = e1.cross(&e2);
                return (origin - a).dot(&n).abs() > 1e-12 * n.norm() * (1.0 + (origin - a).norm());
            }
            let inv = 1.0 / det;
            let s = origin - a;
            let u = s.dot(&p) * inv;
            let q = s.cross(&e1);
            let v = dir.dot(&q) * inv;
            const EPS: f64 = 1e-10;
            if u < -EPS || v < -EPS || u + v > 1.0 + EPS {
                return true;
            }
            if u < EPS || v < EPS || u + v > 1.0 - EPS {
                return false;
            }
            let t = e2.dot(&q) * inv;
            let normal_dot = e1.cross(&e2).dot(dir);
            out.push(Crossing {
                t,
                winding: if normal_dot < 0.0 { 1 } else { -1 },
            });
            true
        };
        match candidates {
            Some(list) => {
                for &fi in list {
                    if !test(fi) {
                        return None;
                    }
                }
            }
            None => {
                for fi in 0..self.faces.len() {
                    if !test(fi) {
                        return None;
                    }
                }
            }
        }
        out.sort_by(|a, b| a.t.total_cmp(&b.t));
        Some(out)
    }

    /// Sorted crossings of the line through `origin` along `dir`. Lines that
    /// graze an edge are nudged sideways by ~1e-7 of the mesh scale.
    pub fn line_crossings(&self, origin: &Vec3, dir: &Vec3) -> Vec<Crossing> {
        self.line_crossings_among(origin, dir, None)
    }

    pub(crate) fn line_crossings_among(
        &self,
        origin: &Vec3,
        dir: &Vec3,
        candidates: Option<&[usize]>,
    ) -> Vec<Crossing> {
        if let Some(c) = self.crossings_exact(origin, dir, candidates) {
            return c;
        }
        let d = dir.normalize();
        let helper = if d.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let e1 = d.cross(&helper).normalize();
        let e2 = d.cross(&e1);
        let scale = self
            .bounds()
            .map(|(lo, hi)| (hi - lo).norm())
            .unwrap_or(1.0)
            .max(1e-3);
        for (k, (a, b)) in NUDGES.iter().enumerate() {
            let delta = 1e-7 * scale * (k + 1) as f64;
            let o = origin + (e1 * *a + e2 * *b) * delta;
            if let Some(c) = self.crossings_exact(&o, dir, candidates) {
                return c;
            }
        }
        // Give up on exactness: accept whatever the last nudge produced.
        let o = origin + (e1 * 0.61 + e2 * 0.37) * (1e-5 * scale);
        self.crossings_exact(&o, dir, None).unwrap_or_default()
    }

    /// Intervals `[t0, t1]` of the line inside the solid (winding > 0).
    pub fn inside_intervals(&self, origin: &Vec3, dir: &Vec3) -> Vec<(f64, f64)> {
        intervals_from_crossings(&self.line_crossings(origin, dir))
    }

    /// Total length (in units of `|dir|`) of the ray `t >= 0` inside the solid.
    pub fn ray_inside_length(&self, origin: &Vec3, dir: &Vec3) -> f64 {
        let scale = dir.norm();
        self.inside_intervals(origin, dir)
            .into_iter()
            .map(|(a, b)| (b.max(0.0) - a.max(0.0)).max(0.0))
            .sum::<f64>()
            * scale
    }
}

pub(crate) fn intervals_from_crossings(crossings: &[Crossing]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut winding = 0;
    let mut start = 0.0;
    for c in crossings {
        let before = winding;
        winding += c.winding;
        if before <= 0 && winding > 0 {
            start = c.t;
        } else if before > 0 && winding <= 0 {
            out.push((start, c.t));
        }
    }
    out
}

/// Axis-aligned box as 12 outward-oriented triangles.
pub fn box_mesh(min: Vec3, max: Vec3) -> TriangleMesh {
    let v = |x: bool, y: bool, z: bool| {
        Vec3::new(
            if x { max.x } else { min.x },
            if y { max.y } else { min.y },
            if z { max.z } else { min.z },
        )
    };
    let vertices = vec![
        v(false, false, false),
        v(true, false, false),
        v(true, true, false),
        v(false, true, false),
        v(false, false, true),
        v(true, false, true),
        v(true, true, true),
        v(false, true, true),
    ];
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [1, 2, 6],
        [1, 6, 5],
        [2, 3, 7],
        [2, 7, 6],
        [3, 0, 4],
        [3, 4, 7],
    ];
    TriangleMesh::new(vertices, faces)
}

/// Latitude/longitude sphere with outward-oriented faces.
pub fn uv_sphere(center: Vec3, radius: f64, rings: usize, segments: usize) -> TriangleMesh {
    let rings = rings.max(2);
    let segments = segments.max(3);
    let mut vertices = vec![center + Vec3::new(0.0, 0.0, radius)];
    for i in 1..rings {
        let theta = std::f64::consts::PI * i as f64 / rings as f64;
        for j in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / segments as f64;
            vertices.push(
                center
                    + Vec3::new(
                        theta.sin() * phi.cos(),
                        theta.sin() * phi.sin(),
                        theta.cos(),
                    ) * radius,
            );
        }
    }
    vertices.push(center - Vec3::new(0.0, 0.0, radius));
    let south = vertices.len() - 1;
    let ring = |i: usize, j: usize| 1 + (i - 1) * segments + (j % segments);
    let mut faces = Vec::new();
    for j in 0..segments {
        faces.push([0, ring(1, j), ring(1, j + 1)]);
        faces.push([south, ring(rings - 1, j + 1), ring(rings - 1, j)]);
    }
    for i in 1..rings - 1 {
        for j in 0..segments {
            let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j + 1), ring(i + 1, j));
            faces.push([a, d, c]);
            faces.push([a, c, b]);
        }
    }
    TriangleMesh::new(vertices, faces)
}

/// Closed prism of `segments` sides approximating the cylinder of `radius`
/// around the segment `a`-`b`, outward-oriented.
pub fn cylinder_mesh(a: Vec3, b: Vec3, radius: f64, segments: usize) -> TriangleMesh {
    let segments = segments.max(3);
    let axis = (b - a).normalize();
    let helper = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = axis.cross(&helper).normalize();
    let v = axis.cross(&u);
    let mut vertices = vec![a, b];
    for end in [a, b] {
        for j in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / segments as f64;
            vertices.push(end + (u * phi.cos() + v * phi.sin()) * radius);
        }
    }
    let lo = |j: usize| 2 + j % segments;
    let hi = |j: usize| 2 + segments + j % segments;
    let mut faces = Vec::with_capacity(4 * segments);
    for j in 0..segments {
        faces.push([0, lo(j + 1), lo(j)]);
        faces.push([1, hi(j), hi(j + 1)]);
        faces.push([lo(j), lo(j + 1), hi(j + 1)]);
        faces.push([lo(j), hi(j + 1), hi(j)]);
    }
    TriangleMesh::new(vertices, faces)
}
