//! Transpedicular trajectories: transfer from a fitted model, clearance
//! checks against pedicle vertices, and the two-view plane-intersection
//! baseline (2D-GeoPlan).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraView, GeometryError, Ray, RigidTransform, Vec2, Vec3, DEFAULT_MIN_RAY_ANGLE_DEG};
use crate::ssm::{instantiate, PoseShapeParams, ShapeModel, Side, SsmError};

/// Cannula diameter (mm).
pub const DEFAULT_DIAMETER: f64 = 5.0;
/// Axis-to-pedicle distance (mm) strictly below which a plan breaches.
pub const DEFAULT_CLEARANCE_THRESHOLD: f64 = 2.5;
/// Minimum length of an annotated 2D segment (px).
pub const MIN_SEGMENT_PX: f64 = 5.0;
pub const MIN_TRAJECTORY_LENGTH: f64 = 1.0;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("no pedicle points to check clearance against")]
    EmptyPointSet,
    #[error("segment in view {view} is {length:.2} px long (minimum {MIN_SEGMENT_PX})")]
    ShortSegment { view: usize, length: f64 },
    #[error("degenerate plane configuration: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Model(#[from] SsmError),
    #[error(transparent)]
    Camera(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub side: Side,
    pub entry: Vec3,
    pub target: Vec3,
    pub diameter: f64,
}

impl Trajectory {
    pub fn new(side: Side, entry: Vec3, target: Vec3, diameter: f64) -> Result<Self, PlanError> {
        let t = Self {
            side,
            entry,
            target,
            diameter,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let len = self.length();
        if !(len > MIN_TRAJECTORY_LENGTH) {
            return Err(PlanError::InvalidTrajectory(format!("length {len:.3} mm is at most 1 mm")));
        }
        if !(self.diameter > 0.0) || !self.diameter.is_finite() {
            return Err(PlanError::InvalidTrajectory(format!("diameter {} must be positive", self.diameter)));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        (self.target - self.entry).norm()
    }

    pub fn direction(&self) -> Vec3 {
        (self.target - self.entry).normalize()
    }

    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            entry: t.apply(&self.entry),
            target: t.apply(&self.target),
            ..*self
        }
    }

    /// Distance from `p` to the axis segment.
    pub fn axis_distance(&self, p: &Vec3) -> f64 {
        let d = self.target - self.entry;
        let s = ((p - self.entry).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
        (p - (self.entry + d * s)).norm()
    }

    pub fn endpoint_error(&self, other: &Trajectory) -> f64 {
        (self.entry - other.entry).norm().max((self.target - other.target).norm())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClearanceReport {
    /// Smallest distance (mm) from a pedicle point to the trajectory axis.
    pub min_axis_distance: f64,
    pub threshold: f64,
    pub breach: bool,
}

/// Both trajectories of a fitted instance, from its annotated entry and
/// exit vertices.
pub fn plan_from_fit(model: &ShapeModel, params: &PoseShapeParams, diameter: f64) -> Result<[Trajectory; 2], PlanError> {
    let pts = instantiate(model, params)?;
    plan_from_points(model, &pts, diameter)
}

pub fn plan_from_points(model: &ShapeModel, pts: &[Vec3], diameter: f64) -> Result<[Trajectory; 2], PlanError> {
    let make = |side| {
        let idx = model.annotations.trajectory(side);
        Trajectory::new(side, pts[idx.entry], pts[idx.exit], diameter)
    };
    Ok([make(Side::Left)?, make(Side::Right)?])
}

/// Pedicle vertex positions of one side of an instance.
pub fn pedicle_points(model: &ShapeModel, pts: &[Vec3], side: Side) -> Vec<Vec3> {
    model.annotations.pedicle(side).iter().map(|&i| pts[i]).collect()
}

pub fn clearance(traj: &Trajectory, pedicle_points: &[Vec3], threshold: f64) -> Result<ClearanceReport, PlanError> {
    if pedicle_points.is_empty() {
        return Err(PlanError::EmptyPointSet);
    }
    let min_axis_distance = pedicle_points
        .iter()
        .map(|p| traj.axis_distance(p))
        .fold(f64::INFINITY, f64::min);
    Ok(ClearanceReport {
        min_axis_distance,
        threshold,
        breach: min_axis_distance < threshold,
    })
}

/// A 2D trajectory annotation in one view, entry first (pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment2 {
    pub entry: Vec2,
    pub target: Vec2,
}

impl Segment2 {
    pub fn length(&self) -> f64 {
        (self.target - self.entry).norm()
    }
}

struct Plane {
    origin: Vec3,
    normal: Vec3,
}

fn segment_plane(seg: &Segment2, cam: &CameraView, view: usize) -> Result<(Plane, Ray, Ray), PlanError> {
    let length = seg.length();
    if !(length > MIN_SEGMENT_PX) {
        return Err(PlanError::ShortSegment { view, length });
    }
    cam.validate()?;
    let a = cam.back_project(&seg.entry);
    let b = cam.back_project(&seg.target);
    let normal = a.direction.cross(&b.direction).normalize();
    Ok((
        Plane {
            origin: a.origin,
            normal,
        },
        a,
        b,
    ))
}

fn intersect(ray: &Ray, plane: &Plane, min_angle_deg: f64) -> Result<Vec3, PlanError> {
    let denom = plane.normal.dot(&ray.direction);
    if denom.abs() < min_angle_deg.to_radians().sin() {
        return Err(PlanError::Degenerate(
            "endpoint ray is parallel to the other view's plane".into(),
        ));
    }
    let t = plane.normal.dot(&(plane.origin - ray.origin)) / denom;
    Ok(ray.at(t))
}

/// Lifts two 2D segments to a 3D trajectory. Each segment and its camera
/// centre span a plane; each endpoint ray is cut by the other view's plane
/// and the two estimates per endpoint are averaged.
pub fn geoplan_triangulate(
    line_a: &Segment2,
    cam_a: &CameraView,
    line_b: &Segment2,
    cam_b: &CameraView,
    side: Side,
    diameter: f64,
) -> Result<Trajectory, PlanError> {
    let (pa, a0, a1) = segment_plane(line_a, cam_a, 0)?;
    let (pb, b0, b1) = segment_plane(line_b, cam_b, 1)?;
    let cos = pa.normal.dot(&pb.normal).abs().min(1.0);
    let angle = cos.acos().to_degrees();
    if angle < DEFAULT_MIN_RAY_ANGLE_DEG {
        return Err(PlanError::Degenerate(format!("planes are {angle:.4} deg from parallel")));
    }
    let m = DEFAULT_MIN_RAY_ANGLE_DEG;
    let entry = (intersect(&a0, &pb, m)? + intersect(&b0, &pa, m)?) * 0.5;
    let target = (intersect(&a1, &pb, m)? + intersect(&b1, &pa, m)?) * 0.5;
    Trajectory::new(side, entry, target, diameter)
}
