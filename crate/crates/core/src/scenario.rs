//! Synthetic two-view experiments: camera rigs, pose perturbations,
//! landmark and segment projections with pixel noise, and reconstruction
//! scoring. Shared by the command-line tool and the test suites.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};

use crate::eval::{compare_volumes, voxelize_mesh, EvalError, MetricReport, DEFAULT_NSD_TAU};
use crate::geometry::{so3_exp, CameraView, GeometryError, RigidTransform, Vec2, Vec3};
use crate::image::Image;
use crate::mesh::TriangleMesh;
use crate::optimize::LandmarkObservation;
use crate::planning::Segment2;
use crate::ssm::{Annotations, ShapeModel, BACKUP_LANDMARKS, PRIMARY_LANDMARKS};

/// Detector and source geometry of a two-view rig.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rig {
    pub size: usize,
    pub focal: f64,
    /// Source-to-isocentre distance (mm).
    pub distance: f64,
    pub pixel_spacing: f64,
}

impl Rig {
    /// 128 px detector, focal 800 px, 600 mm from the isocentre.
    pub fn fitting() -> Self {
        Self {
            size: 128,
            focal: 800.0,
            distance: 600.0,
            pixel_spacing: 0.3,
        }
    }

    /// 256 px detector, focal 1600 px, 600 mm from the isocentre.
    pub fn planning() -> Self {
        Self {
            size: 256,
            focal: 1600.0,
            distance: 600.0,
            pixel_spacing: 0.3,
        }
    }

    /// 512 px detector, focal 1000 px, 600 mm from the isocentre.
    pub fn clinical() -> Self {
        Self {
            size: 512,
            focal: 1000.0,
            distance: 600.0,
            pixel_spacing: 0.3,
        }
    }

    /// Camera on the horizontal circle around `center`, at `azimuth_deg` from
    /// the anterior (+y) axis toward +x, with +z up in the image.
    pub fn view(&self, center: &Vec3, azimuth_deg: f64) -> Result<CameraView, GeometryError> {
        let a = azimuth_deg.to_radians();
        let eye = center + Vec3::new(a.sin(), a.cos(), 0.0) * self.distance;
        CameraView::look_at(
            eye,
            *center,
            Vec3::z(),
            self.focal,
            self.size,
            self.size,
            self.pixel_spacing,
        )
    }

    /// AP view plus a second view `separation_deg` around the vertical axis.
    pub fn pair(&self, center: &Vec3, separation_deg: f64) -> Result<[CameraView; 2], GeometryError> {
        Ok([self.view(center, 0.0)?, self.view(center, separation_deg)?])
    }
}

pub fn random_unit_vector(rng: &mut impl Rng) -> Vec3 {
    let v: [f64; 3] = UnitSphere.sample(rng);
    Vec3::new(v[0], v[1], v[2])
}

/// `pose` composed with a rotation of exactly `angle_deg` about a random axis
/// through its translation, and shifted by exactly `shift_mm` in a random
/// direction.
pub fn perturb_pose(pose: &RigidTransform, angle_deg: f64, shift_mm: f64, rng: &mut impl Rng) -> RigidTransform {
    let axis = random_unit_vector(rng);
    let dir = random_unit_vector(rng);
    let r = so3_exp(&(axis * angle_deg.to_radians())) * pose.rotation_matrix();
    RigidTransform::from_matrix(&r, pose.translation + dir * shift_mm)
}

/// Rotation (degrees) and translation (mm) differences between two poses.
pub fn pose_errors(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
    (a.rotation_angle_to(b).to_degrees(), (a.translation - b.translation).norm())
}

/// Shape coefficients drawn as `N(0, 1) * sqrt(eigenvalue)` and clipped to the
/// model's coefficient box.
pub fn random_coefficients(model: &ShapeModel, rng: &mut impl Rng) -> Vec<f64> {
    let mut c: Vec<f64> = model
        .eigenvalues
        .iter()
        .map(|l| {
            let z: f64 = StandardNormal.sample(rng);
            z * l.max(0.0).sqrt()
        })
        .collect();
    model.clamp_coefficients(&mut c);
    c
}

/// Vertex index of every landmark id (primary then backup).
pub fn landmark_ids() -> std::ops::Range<usize> {
    0..PRIMARY_LANDMARKS + BACKUP_LANDMARKS
}

/// Adds i.i.d. Gaussian noise of standard deviation `sigma` to every pixel.
pub fn add_pixel_noise(img: &mut Image, sigma: f64, rng: &mut impl Rng) {
    if sigma > 0.0 {
        for p in img.data.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *p += sigma * z;
        }
    }
}

fn gaussian_pixel(p: Vec2, sigma: f64, rng: &mut impl Rng) -> Vec2 {
    if sigma == 0.0 {
        return p;
    }
    let (dx, dy): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
    p + Vec2::new(dx, dy) * sigma
}

/// Projects the annotated landmarks of `points` with isotropic Gaussian
/// pixel noise of standard deviation `noise_px`.
pub fn project_landmarks(
    annotations: &Annotations,
    points: &[Vec3],
    cam: &CameraView,
    noise_px: f64,
    rng: &mut impl Rng,
) -> Result<Vec<LandmarkObservation>, GeometryError> {
    landmark_ids()
        .map(|id| {
            let vi = annotations.landmark_vertex(id).expect("id within annotation range");
            let p = gaussian_pixel(cam.project(&points[vi])?, noise_px, rng);
            Ok(LandmarkObservation {
                id,
                u: p.x,
                v: p.y,
                confidence: 1.0,
            })
        })
        .collect()
}

/// Projects a 3D segment with independent Gaussian noise on each endpoint.
pub fn project_segment(
    entry: &Vec3,
    target: &Vec3,
    cam: &CameraView,
    noise_px: f64,
    rng: &mut impl Rng,
) -> Result<Segment2, GeometryError> {
    Ok(Segment2 {
        entry: gaussian_pixel(cam.project(entry)?, noise_px, rng),
        target: gaussian_pixel(cam.project(target)?, noise_px, rng),
    })
}

/// Volumetric comparison of two instances of the same model, voxelised from
/// its surface faces at `spacing`.
pub fn compare_instances(
    model: &ShapeModel,
    estimate: &[Vec3],
    truth: &[Vec3],
    spacing: f64,
) -> Result<MetricReport, EvalError> {
    let a = voxelize_mesh(&TriangleMesh::new(estimate.to_vec(), model.faces.clone()), spacing)?;
    let b = voxelize_mesh(&TriangleMesh::new(truth.to_vec(), model.faces.clone()), spacing)?;
    compare_volumes(&a, &b, DEFAULT_NSD_TAU)
}
