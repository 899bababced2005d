//! Rigid transforms, pinhole cameras, ray triangulation and point-set alignment.
//!
//! Conventions used throughout the crate:
//! - world points are in millimetres;
//! - a camera maps a world point `X` to camera coordinates `R_cam X + t_cam`,
//!   with `+z` pointing along the optical axis and `+y` pointing down the image;
//! - pixel `(u, v)` has its centre at the integer coordinate, so the principal
//!   point `(cx, cy)` is the pixel hit by the optical axis.

use nalgebra::{Matrix2x3, Matrix3, Matrix3x4, Vector2, Vector3, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;
pub type Mat3 = Matrix3<f64>;

/// Minimum camera-frame depth (mm) accepted by [`CameraView::project`].
pub const MIN_DEPTH: f64 = 1e-6;

/// Default minimum angle between two rays (or planes) for triangulation.
pub const DEFAULT_MIN_RAY_ANGLE_DEG: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth:.3e} mm)")]
    BehindCamera { depth: f64 },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("degenerate point set: {0}")]
    DegeneratePointSet(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// Skew-symmetric cross-product matrix, `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential map from an axis-angle vector to a rotation matrix.
pub fn so3_exp(axis_angle: &Vec3) -> Mat3 {
    let theta2 = axis_angle.norm_squared();
    let k = skew(axis_angle);
    let (a, b) = if theta2 < 1e-12 {
        // Taylor series of sin(t)/t and (1 - cos t)/t^2
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + k * a + k * k * b
}

/// Logarithm map, inverse of [`so3_exp`] for rotation angles in `[0, pi]`.
pub fn so3_log(rotation: &Mat3) -> Vec3 {
    let cos_theta = ((rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let w = Vec3::new(
        rotation[(2, 1)] - rotation[(1, 2)],
        rotation[(0, 2)] - rotation[(2, 0)],
        rotation[(1, 0)] - rotation[(0, 1)],
    );
    if theta < 1e-6 {
        return w * 0.5;
    }
    if std::f64::consts::PI - theta > 1e-6 {
        return w * (theta / (2.0 * theta.sin()));
    }
    // Near pi the antisymmetric part vanishes; recover the axis from R + I.
    let b = (rotation + Mat3::identity()) * 0.5;
    let mut col = 0;
    for i in 1..3 {
        if b[(i, i)] > b[(col, col)] {
            col = i;
        }
    }
    let mut axis: Vec3 = b.column(col).into();
    axis /= axis.norm();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Partial derivatives `dR/dv_k` of [`so3_exp`] for k = 0, 1, 2.
pub fn so3_exp_derivatives(axis_angle: &Vec3) -> [Mat3; 3] {
    let theta2 = axis_angle.norm_squared();
    let basis = [Vec3::x(), Vec3::y(), Vec3::z()];
    if theta2 < 1e-12 {
        let k = skew(axis_angle);
        return basis.map(|e| {
            let ek = skew(&e);
            ek + (k * ek + ek * k) * 0.5
        });
    }
    let r = so3_exp(axis_angle);
    let i_minus_r = Mat3::identity() - r;
    let k = skew(axis_angle);
    basis.map(|e| {
        let idx = if e.x == 1.0 {
            0
        } else if e.y == 1.0 {
            1
        } else {
            2
        };
        let cross = axis_angle.cross(&(i_minus_r * e));
        (k * axis_angle[idx] + skew(&cross)) * r / theta2
    })
}

/// Jacobian of `so3_exp(v) * p` with respect to `v`; column k is `dR/dv_k * p`.
pub fn rotated_point_jacobian(axis_angle: &Vec3, point: &Vec3) -> Mat3 {
    let d = so3_exp_derivatives(axis_angle);
    Mat3::from_columns(&[d[0] * point, d[1] * point, d[2] * point])
}

/// Geodesic angle (radians) between two rotation matrices.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let rel = a.transpose() * b;
    ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

/// Rigid transform `x -> R(rotation) x + translation` with an axis-angle rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Vec3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Vec3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Vec3::zeros(), Vec3::zeros())
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Vec3::zeros(), translation)
    }

    pub fn from_matrix(rotation: &Mat3, translation: Vec3) -> Self {
        Self::new(so3_log(rotation), translation)
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        so3_exp(&self.rotation)
    }

    pub fn apply(&self, point: &Vec3) -> Vec3 {
        self.rotation_matrix() * point + self.translation
    }

    /// `self.compose(other)` applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let r = self.rotation_matrix();
        RigidTransform::from_matrix(
            &(r * other.rotation_matrix()),
            r * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation_matrix().transpose();
        RigidTransform::from_matrix(&rt, -(rt * self.translation))
    }

    pub fn rotation_angle_to(&self, other: &RigidTransform) -> f64 {
        rotation_angle_between(&self.rotation_matrix(), &other.rotation_matrix())
    }
}

/// A half-line in world space. `direction` is unit length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Calibrated pinhole view with zero skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Detector pixel size in mm. Only used for image metadata; projection
    /// scale lives in `fx`, `fy`.
    pub pixel_spacing: f64,
    /// World-to-camera rotation as an axis-angle vector.
    pub rotation: Vec3,
    /// World-to-camera translation (mm).
    pub translation: Vec3,
}

impl CameraView {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.pixel_spacing]
            .iter()
            .chain(self.rotation.iter())
            .chain(self.translation.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidCamera("non-finite parameter".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width < 16 || self.height < 16 {
            return Err(GeometryError::InvalidCamera(format!(
                "image must be at least 16x16 (got {}x{})",
                self.width, self.height
            )));
        }
        if self.pixel_spacing <= 0.0 {
            return Err(GeometryError::InvalidCamera(
                "pixel_spacing must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Camera looking from `eye` towards `target`, with `up` mapped to the
    /// image's upward direction (decreasing row index).
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
        pixel_spacing: f64,
    ) -> Result<Self, GeometryError> {
        let z = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::DegenerateGeometry("eye equals target".into()))?;
        let down = -(up - z * up.dot(&z));
        let y = down.try_normalize(1e-9).ok_or_else(|| {
            GeometryError::DegenerateGeometry("up vector parallel to viewing direction".into())
        })?;
        let x = y.cross(&z);
        let r = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Self {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) * 0.5,
            cy: (height as f64 - 1.0) * 0.5,
            width,
            height,
            pixel_spacing,
            rotation: so3_log(&r),
            translation: -(r * eye),
        })
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        so3_exp(&self.rotation)
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation_matrix().transpose() * self.translation)
    }

    /// Unit viewing direction (optical axis) in world coordinates.
    pub fn view_direction(&self) -> Vec3 {
        self.rotation_matrix().row(2).transpose()
    }

    /// World direction of decreasing image row.
    pub fn up_direction(&self) -> Vec3 {
        -self.rotation_matrix().row(1).transpose()
    }

    pub fn to_camera(&self, point: &Vec3) -> Vec3 {
        self.rotation_matrix() * point + self.translation
    }

    /// `P = K [R_cam | t_cam]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let k = Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0);
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        k * rt
    }

    /// Projects a camera-frame point. Errors when its depth is below [`MIN_DEPTH`].
    pub fn project_camera_point(&self, pc: &Vec3) -> Result<Vec2, GeometryError> {
        if pc.z <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera { depth: pc.z });
        }
        Ok(Vec2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        ))
    }

    pub fn project(&self, point: &Vec3) -> Result<Vec2, GeometryError> {
        self.project_camera_point(&self.to_camera(point))
    }

    /// Jacobian of pixel coordinates w.r.t. a camera-frame point.
    pub fn camera_jacobian(&self, pc: &Vec3) -> Matrix2x3<f64> {
        let iz = 1.0 / pc.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * pc.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * pc.y * iz2,
        )
    }

    /// Projection together with its Jacobian w.r.t. the world point.
    pub fn project_with_jacobian(
        &self,
        point: &Vec3,
    ) -> Result<(Vec2, Matrix2x3<f64>), GeometryError> {
        let r = self.rotation_matrix();
        let pc = r * point + self.translation;
        let px = self.project_camera_point(&pc)?;
        Ok((px, self.camera_jacobian(&pc) * r))
    }

    /// World ray through the centre of pixel `(u, v)`.
    pub fn back_project(&self, pixel: &Vec2) -> Ray {
        let dir_cam = Vec3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        );
        let r = self.rotation_matrix();
        Ray {
            origin: -(r.transpose() * self.translation),
            direction: (r.transpose() * dir_cam).normalize(),
        }
    }

    /// Same view with the detector resampled by `factor` (>1 shrinks the image).
    pub fn downsampled(&self, factor: usize) -> Self {
        let f = factor as f64;
        Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: (self.cx + 0.5) / f - 0.5,
            cy: (self.cy + 0.5) / f - 0.5,
            width: self.width / factor,
            height: self.height / factor,
            pixel_spacing: self.pixel_spacing * f,
            ..*self
        }
    }
}

/// Result of two-ray midpoint triangulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation {
    pub point: Vec3,
    /// Length of the common perpendicular between the two rays (mm).
    pub gap: f64,
}

/// Closest points `(s, t)` along two rays; errors when the rays are closer
/// than `min_angle_deg` to parallel.
pub fn closest_ray_parameters(
    a: &Ray,
    b: &Ray,
    min_angle_deg: f64,
) -> Result<(f64, f64), GeometryError> {
    let cos = a.direction.dot(&b.direction).abs().min(1.0);
    let angle = cos.acos().to_degrees();
    if angle < min_angle_deg {
        return Err(GeometryError::DegenerateGeometry(format!(
            "rays are {angle:.4} deg apart (minimum {min_angle_deg} deg)"
        )));
    }
    let w0 = a.origin - b.origin;
    let bb = a.direction.dot(&b.direction);
    let d = a.direction.dot(&w0);
    let e = b.direction.dot(&w0);
    let denom = 1.0 - bb * bb;
    let s = (bb * e - d) / denom;
    let t = (e - bb * d) / denom;
    Ok((s, t))
}

pub fn triangulate_rays(a: &Ray, b: &Ray, min_angle_deg: f64) -> Result<Triangulation, GeometryError> {
    let (s, t) = closest_ray_parameters(a, b, min_angle_deg)?;
    let pa = a.at(s);
    let pb = b.at(t);
    Ok(Triangulation {
        point: (pa + pb) * 0.5,
        gap: (pa - pb).norm(),
    })
}

/// Midpoint triangulation of one correspondence seen in two views.
pub fn triangulate_point(
    px_a: &Vec2,
    cam_a: &CameraView,
    px_b: &Vec2,
    cam_b: &CameraView,
) -> Result<Triangulation, GeometryError> {
    triangulate_point_with(px_a, cam_a, px_b, cam_b, DEFAULT_MIN_RAY_ANGLE_DEG)
}

pub fn triangulate_point_with(
    px_a: &Vec2,
    cam_a: &CameraView,
    px_b: &Vec2,
    cam_b: &CameraView,
    min_angle_deg: f64,
) -> Result<Triangulation, GeometryError> {
    cam_a.validate()?;
    cam_b.validate()?;
    triangulate_rays(&cam_a.back_project(px_a), &cam_b.back_project(px_b), min_angle_deg)
}

/// Least-squares rigid alignment result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub transform: RigidTransform,
    /// Root-mean-square residual `|R src + t - dst|` over the correspondences.
    pub rms: f64,
}

/// Kabsch alignment (no scale) minimising `sum |R src_i + t - dst_i|^2`.
pub fn rigid_align(src: &[Vec3], dst: &[Vec3]) -> Result<Alignment, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::DegeneratePointSet(format!(
            "correspondence count mismatch ({} vs {})",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(GeometryError::DegeneratePointSet(format!(
            "need at least 3 correspondences, got {}",
            src.len()
        )));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vec3>() / n;
    let mu_d = dst.iter().sum::<Vec3>() / n;

    let mut scatter = Mat3::zeros();
    let mut h = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mu_s;
        scatter += sc * sc.transpose();
        h += (d - mu_d) * sc.transpose();
    }
    // Collinear sources leave the rotation about their common line free.
    let sv = scatter.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 0.0 || sv[1] < 1e-9 * sv[0] {
        return Err(GeometryError::DegeneratePointSet(
            "source points are collinear or coincident".into(),
        ));
    }

    let svd = SVD::new(h, true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let t = mu_d - r * mu_s;
    let sq: f64 = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (r * s + t - d).norm_squared())
        .sum();
    Ok(Alignment {
        transform: RigidTransform::from_matrix(&r, t),
        rms: (sq / n).sqrt(),
    })
}
