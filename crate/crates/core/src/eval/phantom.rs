//! Procedural vertebra-like phantoms with controlled shape variation.
//!
//! The solid is a union of closed tubes: an elliptic vertebral body, two
//! pedicles, a lamina bar and a spinous process. Points are the tube surface
//! vertices plus interior shells, so splatting them approximates a density
//! projection. Frame: +x left, +y anterior, +z superior, body centred at the
//! origin.
//!
//! Samples are `template + sum_j z_j * field_j` with `z ~ N(0, 1)`; every
//! field is a fixed per-point displacement, so shapes are exactly linear in
//! the latent factors and share topology.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;
use crate::mesh::TriangleMesh;
use crate::ssm::{Annotations, TrajectoryIndices};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// Target spacing between neighbouring points (mm).
    pub spacing: f64,
    /// Include interior shells and axis points.
    pub interior: bool,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            spacing: 4.5,
            interior: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Part {
    Body,
    LeftPedicle,
    RightPedicle,
    Lamina,
    Spinous,
    Anchor,
}

/// Template geometry shared by every sample of a family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTemplate {
    pub points: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub parts: Vec<Part>,
    pub surface: Vec<bool>,
    pub annotations: Annotations,
    /// Offset of each pedicle point from its pedicle axis (zero elsewhere).
    pub pedicle_radial: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomFamily {
    pub seed: u64,
    pub latent_dims: usize,
    pub config: PhantomConfig,
    pub template: PhantomTemplate,
    /// `latent_dims` displacement fields, one vector per point.
    pub fields: Vec<Vec<Vec3>>,
    pub latents: Vec<Vec<f64>>,
    pub samples: Vec<Vec<Vec3>>,
}

struct Tube {
    /// Surface rings, `rings[j][k]`.
    rings: Vec<Vec<usize>>,
    /// Axis points at each ring position (cap centres at both ends).
    axis: Vec<usize>,
    a: Vec3,
    b: Vec3,
}

#[derive(Default)]
struct Builder {
    points: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    parts: Vec<Part>,
    surface: Vec<bool>,
    radial: Vec<Vec3>,
}

impl Builder {
    fn push(&mut self, p: Vec3, part: Part, surface: bool, radial: Vec3) -> usize {
        self.points.push(p);
        self.parts.push(part);
        self.surface.push(surface);
        self.radial.push(radial);
        self.points.len() - 1
    }

    /// Elliptic tube from `a` to `b`; `up` fixes the first cross-section axis
    /// (radius `ru`), the second (radius `rv`) is `axis x u`.
    #[allow(clippy::too_many_arguments)]
    fn tube(&mut self, part: Part, a: Vec3, b: Vec3, up: Vec3, ru: f64, rv: f64, cfg: &PhantomConfig) -> Tube {
        let len = (b - a).norm();
        let e = (b - a) / len;
        let u = (up - e * up.dot(&e)).normalize();
        let v = e.cross(&u);
        let perimeter = 2.0 * std::f64::consts::PI * ((ru * ru + rv * rv) / 2.0).sqrt();
        let ns = ((perimeter / cfg.spacing).ceil() as usize).max(6);
        let nr = 2 * ((len / (2.0 * cfg.spacing)).ceil() as usize).max(1) + 1;
        let track = matches!(part, Part::LeftPedicle | Part::RightPedicle);
        let mut rings = Vec::with_capacity(nr);
        let mut axis = Vec::with_capacity(nr);
        let shells = if cfg.interior {
            (ru.max(rv) / cfg.spacing).floor() as usize
        } else {
            0
        };
        for j in 0..nr {
            let s = j as f64 / (nr - 1) as f64;
            let c = a + (b - a) * s;
            let ring: Vec<usize> = (0..ns)
                .map(|k| {
                    let phi = 2.0 * std::f64::consts::PI * k as f64 / ns as f64;
                    let off = u * (ru * phi.cos()) + v * (rv * phi.sin());
                    self.push(c + off, part, true, if track { off } else { Vec3::zeros() })
                })
                .collect();
            rings.push(ring);
            let end = j == 0 || j + 1 == nr;
            if end || cfg.interior {
                axis.push(self.push(c, part, end, Vec3::zeros()));
            }
            for m in 1..=shells {
                let rho = m as f64 / (shells + 1) as f64;
                let count = ((ns as f64 * rho).ceil() as usize).max(3);
                for k in 0..count {
                    let phi = 2.0 * std::f64::consts::PI * (k as f64 + 0.5 * (m % 2) as f64) / count as f64;
                    let off = (u * (ru * phi.cos()) + v * (rv * phi.sin())) * rho;
                    self.push(c + off, part, false, if track { off } else { Vec3::zeros() });
                }
            }
        }
        for j in 0..nr - 1 {
            for k in 0..ns {
                let k1 = (k + 1) % ns;
                let (p00, p01, p10, p11) = (rings[j][k], rings[j][k1], rings[j + 1][k], rings[j + 1][k1]);
                self.faces.push([p00, p01, p11]);
                self.faces.push([p00, p11, p10]);
            }
        }
        let (c0, c1) = (axis[0], *axis.last().expect("tube has end caps"));
        for k in 0..ns {
            let k1 = (k + 1) % ns;
            self.faces.push([c0, rings[0][k1], rings[0][k]]);
            self.faces.push([c1, rings[nr - 1][k], rings[nr - 1][k1]]);
        }
        Tube { rings, axis, a, b }
    }

    fn closest_on_ring(&self, ring: &[usize], center: Vec3, dir: Vec3) -> usize {
        *ring
            .iter()
            .max_by(|&&p, &&q| {
                let dp = (self.points[p] - center).normalize().dot(&dir);
                let dq = (self.points[q] - center).normalize().dot(&dir);
                dp.total_cmp(&dq)
            })
            .expect("non-empty ring")
    }
}

impl Tube {
    fn ring_center(&self, j: usize) -> Vec3 {
        let s = j as f64 / (self.rings.len() - 1) as f64;
        self.a + (self.b - self.a) * s
    }
    fn mid(&self) -> usize {
        self.rings.len() / 2
    }
}

const BODY_HALF_HEIGHT: f64 = 12.5;
const BODY_RX: f64 = 20.0;
const BODY_RY: f64 = 15.0;
const PEDICLE_RADIUS: f64 = 4.0;
const LAMINA_RADIUS: f64 = 3.5;
const TARGET_DEPTH: f64 = 0.8;

pub fn build_template(cfg: &PhantomConfig) -> PhantomTemplate {
    let mut bld = Builder::default();
    let body = bld.tube(
        Part::Body,
        Vec3::new(0.0, 0.0, -BODY_HALF_HEIGHT),
        Vec3::new(0.0, 0.0, BODY_HALF_HEIGHT),
        Vec3::x(),
        BODY_RX,
        BODY_RY,
        cfg,
    );
    let ped = |x: f64| (Vec3::new(x * 9.0, -8.0, 2.0), Vec3::new(x * 13.0, -28.0, 2.0));
    let (la, lb) = ped(1.0);
    let (ra, rb) = ped(-1.0);
    let left = bld.tube(Part::LeftPedicle, la, lb, Vec3::z(), PEDICLE_RADIUS, PEDICLE_RADIUS, cfg);
    let right = bld.tube(Part::RightPedicle, ra, rb, Vec3::z(), PEDICLE_RADIUS, PEDICLE_RADIUS, cfg);
    let lamina = bld.tube(Part::Lamina, rb, lb, Vec3::z(), LAMINA_RADIUS, LAMINA_RADIUS, cfg);
    let spinous = bld.tube(
        Part::Spinous,
        Vec3::new(0.0, -28.0, 2.0),
        Vec3::new(0.0, -48.0, -8.0),
        Vec3::z(),
        5.0,
        3.0,
        cfg,
    );
    let centroid = bld.push(Vec3::zeros(), Part::Anchor, false, Vec3::zeros());
    let left_target = bld.push(la + (la - lb) * TARGET_DEPTH, Part::Anchor, false, Vec3::zeros());
    let right_target = bld.push(ra + (ra - rb) * TARGET_DEPTH, Part::Anchor, false, Vec3::zeros());

    let top = body.rings.len() - 1;
    let bm = body.mid();
    let on = |bld: &Builder, t: &Tube, j: usize, d: Vec3| bld.closest_on_ring(&t.rings[j], t.ring_center(j), d);
    let landmarks = vec![
        on(&bld, &body, top, Vec3::y()),
        on(&bld, &body, top, -Vec3::y()),
        on(&bld, &body, 0, Vec3::y()),
        on(&bld, &body, 0, -Vec3::y()),
        *left.axis.last().expect("cap"),
        *right.axis.last().expect("cap"),
        *spinous.axis.last().expect("cap"),
        on(&bld, &lamina, lamina.mid(), Vec3::z()),
        on(&bld, &spinous, 0, Vec3::z()),
        on(&bld, &body, bm, Vec3::y()),
    ];
    let backup_landmarks = vec![
        centroid,
        *body.axis.last().expect("cap"),
        body.axis[0],
        on(&bld, &body, bm, Vec3::x()),
        on(&bld, &body, bm, -Vec3::x()),
    ];
    let annotations = Annotations {
        landmarks,
        backup_landmarks,
        left_trajectory: TrajectoryIndices {
            entry: *left.axis.last().expect("cap"),
            exit: left_target,
        },
        right_trajectory: TrajectoryIndices {
            entry: *right.axis.last().expect("cap"),
            exit: right_target,
        },
        left_pedicle: left.rings.iter().flatten().copied().collect(),
        right_pedicle: right.rings.iter().flatten().copied().collect(),
    };
    PhantomTemplate {
        points: bld.points,
        faces: bld.faces,
        parts: bld.parts,
        surface: bld.surface,
        annotations,
        pedicle_radial: bld.radial,
    }
}

/// Fixed anatomical fields first, then seeded smooth random fields.
fn displacement_fields(t: &PhantomTemplate, dims: usize, seed: u64) -> Vec<Vec<Vec3>> {
    let n = t.points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..dims)
        .map(|j| {
            let field: Vec<Vec3> = match j {
                0 => t.points.iter().map(|p| Vec3::new(0.06 * p.x, 0.0, 0.0)).collect(),
                1 => t.points.iter().map(|p| Vec3::new(0.0, 0.06 * p.y, 0.0)).collect(),
                2 => t.points.iter().map(|p| Vec3::new(0.0, 0.0, 0.06 * p.z)).collect(),
                3 => t.pedicle_radial.iter().map(|r| r * 0.1).collect(),
                4 => t
                    .points
                    .iter()
                    .map(|p| Vec3::new(0.0, -0.05 * (-p.y - 10.0).max(0.0), 0.0))
                    .collect(),
                5 => t
                    .points
                    .iter()
                    .map(|p| Vec3::new(0.0, 0.0, 0.06 * (p.y + 28.0).min(0.0)))
                    .collect(),
                _ => {
                    let k = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)) * (2.0 * std::f64::consts::PI / 60.0);
                    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let amp = Vec3::from_fn(|_, _| rng.random_range(-0.7..0.7));
                    t.points.iter().map(|p| amp * (k.dot(p) + phase).sin()).collect()
                }
            };
            debug_assert_eq!(field.len(), n);
            field
        })
        .collect()
}

pub fn generate_phantoms(seed: u64, count: usize, latent_dims: usize) -> PhantomFamily {
    generate_phantoms_with(seed, count, latent_dims, &PhantomConfig::default())
}

pub fn generate_phantoms_with(seed: u64, count: usize, latent_dims: usize, cfg: &PhantomConfig) -> PhantomFamily {
    let template = build_template(cfg);
    let fields = displacement_fields(&template, latent_dims, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut family = PhantomFamily {
        seed,
        latent_dims,
        config: *cfg,
        template,
        fields,
        latents: Vec::with_capacity(count),
        samples: Vec::with_capacity(count),
    };
    for _ in 0..count {
        let z: Vec<f64> = (0..latent_dims).map(|_| StandardNormal.sample(&mut rng)).collect();
        family.samples.push(family.instance(&z));
        family.latents.push(z);
    }
    family
}

impl PhantomFamily {
    pub fn point_count(&self) -> usize {
        self.template.points.len()
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.template.faces
    }

    pub fn annotations(&self) -> &Annotations {
        &self.template.annotations
    }

    /// Shape for an arbitrary latent vector (missing trailing factors are 0).
    pub fn instance(&self, latent: &[f64]) -> Vec<Vec3> {
        let mut pts = self.template.points.clone();
        for (z, field) in latent.iter().zip(&self.fields) {
            for (p, d) in pts.iter_mut().zip(field) {
                *p += d * *z;
            }
        }
        pts
    }

    pub fn sample_mesh(&self, i: usize) -> TriangleMesh {
        TriangleMesh::new(self.samples[i].clone(), self.template.faces.clone())
    }

    /// Draws `count` further samples from an independent stream, e.g. for
    /// held-out evaluation shapes.
    pub fn held_out(&self, stream: u64, count: usize) -> Vec<(Vec<f64>, Vec<Vec3>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.wrapping_add(1));
        (0..count)
            .map(|_| {
                let z: Vec<f64> = (0..self.latent_dims).map(|_| rng.sample(StandardNormal)).collect();
                let pts = self.instance(&z);
                (z, pts)
            })
            .collect()
    }
}
