//! Point-distribution shape models: generalized Procrustes alignment, PCA,
//! instantiation `X'_i = R (X_i + W_i c) + t`, and annotation lookup.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rigid_align, so3_exp_derivatives, GeometryError, Mat3, RigidTransform, Vec3};

/// Number of primary anatomical landmarks carried by a model.
pub const PRIMARY_LANDMARKS: usize = 10;
/// Backup landmarks: centroid, superior, inferior, left, right.
pub const BACKUP_LANDMARKS: usize = 5;
pub const BACKUP_CENTROID_ID: usize = PRIMARY_LANDMARKS;
pub const DEFAULT_MODES: usize = 15;
/// Coefficients are kept within this many standard deviations of each mode.
pub const COEFF_SIGMA_BOUND: f64 = 3.0;
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Eigenvalue floor for modes with no training variance.
const EIGENVALUE_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SsmError {
    #[error("need at least 2 training shapes, got {0}")]
    TooFewShapes(usize),
    #[error("training shape {index} has {found} points, expected {expected}")]
    InconsistentPointCounts {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("requested {requested} modes but at most {available} are available")]
    RankExceeded { requested: usize, available: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("mode count out of range: {0}")]
    OutOfRange(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryIndices {
    pub entry: usize,
    pub exit: usize,
}

/// Vertex-index annotations carried through point correspondence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotations {
    /// Ten primary landmarks (ids 0..10).
    pub landmarks: Vec<usize>,
    /// Backup landmarks (ids 10..15): centroid, superior, inferior, left, right.
    pub backup_landmarks: Vec<usize>,
    pub left_trajectory: TrajectoryIndices,
    pub right_trajectory: TrajectoryIndices,
    pub left_pedicle: Vec<usize>,
    pub right_pedicle: Vec<usize>,
}

impl Annotations {
    pub fn validate(&self, point_count: usize) -> Result<(), SsmError> {
        if self.landmarks.len() != PRIMARY_LANDMARKS {
            return Err(SsmError::InvalidAnnotation(format!(
                "expected {PRIMARY_LANDMARKS} landmarks, got {}",
                self.landmarks.len()
            )));
        }
        if self.backup_landmarks.len() != BACKUP_LANDMARKS {
            return Err(SsmError::InvalidAnnotation(format!(
                "expected {BACKUP_LANDMARKS} backup landmarks, got {}",
                self.backup_landmarks.len()
            )));
        }
        let traj = [
            self.left_trajectory.entry,
            self.left_trajectory.exit,
            self.right_trajectory.entry,
            self.right_trajectory.exit,
        ];
        let all = self
            .landmarks
            .iter()
            .chain(&self.backup_landmarks)
            .chain(&traj)
            .chain(&self.left_pedicle)
            .chain(&self.right_pedicle);
        for &i in all {
            if i >= point_count {
                return Err(SsmError::InvalidAnnotation(format!(
                    "index {i} out of range for {point_count} points"
                )));
            }
        }
        if self.left_trajectory.entry == self.right_trajectory.entry {
            return Err(SsmError::InvalidAnnotation(
                "left and right entry indices coincide".into(),
            ));
        }
        if self.left_trajectory.entry == self.left_trajectory.exit
            || self.right_trajectory.entry == self.right_trajectory.exit
        {
            return Err(SsmError::InvalidAnnotation(
                "trajectory entry equals exit".into(),
            ));
        }
        Ok(())
    }

    pub fn trajectory(&self, side: Side) -> TrajectoryIndices {
        match side {
            Side::Left => self.left_trajectory,
            Side::Right => self.right_trajectory,
        }
    }

    pub fn pedicle(&self, side: Side) -> &[usize] {
        match side {
            Side::Left => &self.left_pedicle,
            Side::Right => &self.right_pedicle,
        }
    }

    /// Vertex index for landmark id `id` (0..15), if defined.
    pub fn landmark_vertex(&self, id: usize) -> Option<usize> {
        if id < PRIMARY_LANDMARKS {
            self.landmarks.get(id).copied()
        } else {
            self.backup_landmarks.get(id - PRIMARY_LANDMARKS).copied()
        }
    }

    pub fn landmark_count(&self) -> usize {
        self.landmarks.len() + self.backup_landmarks.len()
    }
}

/// Mean shape plus an orthonormal PCA deformation basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeModel {
    pub region_label: String,
    pub mean_points: Vec<Vec3>,
    /// `3N x K`, rows ordered `x0, y0, z0, x1, ...`; columns orthonormal.
    pub basis: DMatrix<f64>,
    /// Per-mode variance (mm^2), descending.
    pub eigenvalues: Vec<f64>,
    /// Trace of the training residual covariance (mm^2).
    pub total_variance: f64,
    pub annotations: Annotations,
    /// Outward-oriented surface triangles over `mean_points` (may be empty).
    pub faces: Vec<[usize; 3]>,
}

/// Pose and shape coefficients: the optimised degrees of freedom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseShapeParams {
    pub pose: RigidTransform,
    pub coeffs: Vec<f64>,
}

impl PoseShapeParams {
    pub fn new(pose: RigidTransform, coeffs: Vec<f64>) -> Self {
        Self { pose, coeffs }
    }

    pub fn identity(modes: usize) -> Self {
        Self::new(RigidTransform::identity(), vec![0.0; modes])
    }

    pub fn dof(&self) -> usize {
        6 + self.coeffs.len()
    }

    /// Flat parameter vector `[rotation(3), translation(3), coeffs(K)]`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dof());
        v.extend(self.pose.rotation.iter());
        v.extend(self.pose.translation.iter());
        v.extend(&self.coeffs);
        v
    }

    pub fn from_vector(v: &[f64]) -> Self {
        Self {
            pose: RigidTransform::new(
                Vec3::new(v[0], v[1], v[2]),
                Vec3::new(v[3], v[4], v[5]),
            ),
            coeffs: v[6..].to_vec(),
        }
    }
}

/// Positions of all annotations for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationPositions {
    pub landmarks: Vec<Vec3>,
    pub backup_landmarks: Vec<Vec3>,
    pub left_trajectory: (Vec3, Vec3),
    pub right_trajectory: (Vec3, Vec3),
}

/// Diagnostics from [`build_model`].
#[derive(Debug, Clone)]
pub struct BuildReport {
    /// Training shapes after Procrustes alignment to the final mean.
    pub aligned: Vec<Vec<Vec3>>,
    /// All non-trivial covariance eigenvalues (min(M-1, 3N)), descending.
    pub spectrum: Vec<f64>,
    /// Cumulative explained-variance fraction for each retained mode.
    pub explained: Vec<f64>,
    pub procrustes_iterations: usize,
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().sum::<Vec3>() / points.len() as f64
}

fn rms_distance(a: &[Vec3], b: &[Vec3]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(p, q)| (p - q).norm_squared()).sum();
    (s / a.len() as f64).sqrt()
}

fn rotate_onto(shape: &[Vec3], reference: &[Vec3]) -> Result<Vec<Vec3>, GeometryError> {
    let r = rigid_align(shape, reference)?.transform;
    Ok(shape.iter().map(|p| r.apply(p)).collect())
}

/// Generalized Procrustes alignment (rotation + translation, no scale).
///
/// Returns the aligned shapes and the number of iterations run. The mean is
/// kept in the frame of the first shape, centred at the origin.
pub fn procrustes_align(shapes: &[Vec<Vec3>]) -> Result<(Vec<Vec<Vec3>>, usize), SsmError> {
    let centred: Vec<Vec<Vec3>> = shapes
        .iter()
        .map(|s| {
            let c = centroid(s);
            s.iter().map(|p| p - c).collect()
        })
        .collect();
    let anchor = centred[0].clone();
    let scale = (anchor.iter().map(|p| p.norm_squared()).sum::<f64>() / anchor.len() as f64)
        .sqrt()
        .max(1e-12);
    let mut reference = anchor.clone();
    let mut iterations = 0;
    for _ in 0..200 {
        iterations += 1;
        let aligned: Vec<Vec<Vec3>> = centred
            .iter()
            .map(|s| rotate_onto(s, &reference))
            .collect::<Result<_, _>>()?;
        let n = reference.len();
        let mut mean = vec![Vec3::zeros(); n];
        for s in &aligned {
            for (m, p) in mean.iter_mut().zip(s) {
                *m += p;
            }
        }
        for m in &mut mean {
            *m /= aligned.len() as f64;
        }
        // Pin the mean's orientation to the first shape so it cannot drift.
        let mean = rotate_onto(&mean, &anchor)?;
        let change = rms_distance(&mean, &reference);
        reference = mean;
        if change < 1e-13 * scale {
            break;
        }
    }
    let aligned = centred
        .iter()
        .map(|s| rotate_onto(s, &reference))
        .collect::<Result<_, _>>()?;
    Ok((aligned, iterations))
}

fn flatten(points: &[Vec3]) -> DVector<f64> {
    DVector::from_iterator(points.len() * 3, points.iter().flat_map(|p| [p.x, p.y, p.z]))
}

/// Modified Gram-Schmidt on the columns, replacing dependent columns with
/// unit vectors orthogonal to the ones already accepted.
fn orthonormalize_columns(m: &mut DMatrix<f64>) {
    let (rows, cols) = m.shape();
    let mut next_fill = 0;
    for j in 0..cols {
        let mut attempts = 0;
        loop {
            let mut v = m.column(j).clone_owned();
            for _ in 0..2 {
                for i in 0..j {
                    let q = m.column(i);
                    let d = q.dot(&v);
                    v.axpy(-d, &q, 1.0);
                }
            }
            let norm = v.norm();
            if norm > 1e-6 || attempts > rows {
                m.set_column(j, &(v / norm));
                break;
            }
            let mut e = DVector::zeros(rows);
            e[next_fill % rows] = 1.0;
            next_fill += 1;
            attempts += 1;
            m.set_column(j, &e);
        }
    }
}

/// Builds a shape model from corresponded training shapes.
pub fn build_model(
    training: &[Vec<Vec3>],
    modes: usize,
    annotations: Annotations,
    faces: Vec<[usize; 3]>,
    region_label: impl Into<String>,
) -> Result<(ShapeModel, BuildReport), SsmError> {
    let m = training.len();
    if m < 2 {
        return Err(SsmError::TooFewShapes(m));
    }
    let n = training[0].len();
    for (index, s) in training.iter().enumerate() {
        if s.len() != n {
            return Err(SsmError::InconsistentPointCounts {
                index,
                expected: n,
                found: s.len(),
            });
        }
    }
    let available = (3 * n).min(m - 1);
    if modes == 0 || modes > available {
        return Err(SsmError::RankExceeded {
            requested: modes,
            available,
        });
    }
    annotations.validate(n)?;
    if let Some(f) = faces.iter().flatten().find(|&&i| i >= n) {
        return Err(SsmError::InvalidAnnotation(format!("face index {f} out of range")));
    }

    let (aligned, procrustes_iterations) = procrustes_align(training)?;
    let mut mean = vec![Vec3::zeros(); n];
    for s in &aligned {
        for (acc, p) in mean.iter_mut().zip(s) {
            *acc += p;
        }
    }
    for p in &mut mean {
        *p /= m as f64;
    }
    let mean_flat = flatten(&mean);

    let mut data = DMatrix::zeros(m, 3 * n);
    for (i, s) in aligned.iter().enumerate() {
        let row = flatten(s) - &mean_flat;
        data.set_row(i, &row.transpose());
    }
    let denom = (m - 1) as f64;
    let total_variance = data.norm_squared() / denom;

    let svd = data.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let spectrum: Vec<f64> = order
        .iter()
        .take(available)
        .map(|&i| svd.singular_values[i].powi(2) / denom)
        .collect();

    let mut basis = DMatrix::zeros(3 * n, modes);
    for (col, &i) in order.iter().take(modes).enumerate() {
        basis.set_column(col, &v_t.row(i).transpose());
    }
    orthonormalize_columns(&mut basis);
    let eigenvalues: Vec<f64> = spectrum
        .iter()
        .take(modes)
        .map(|&l| l.max(EIGENVALUE_FLOOR))
        .collect();

    let mut explained = Vec::with_capacity(modes);
    let mut acc = 0.0;
    for l in &spectrum[..modes] {
        acc += l;
        explained.push(if total_variance > 0.0 {
            (acc / total_variance).min(1.0)
        } else {
            1.0
        });
    }

    let model = ShapeModel {
        region_label: region_label.into(),
        mean_points: mean,
        basis,
        eigenvalues,
        total_variance,
        annotations,
        faces,
    };
    Ok((
        model,
        BuildReport {
            aligned,
            spectrum,
            explained,
            procrustes_iterations,
        },
    ))
}

impl ShapeModel {
    pub fn point_count(&self) -> usize {
        self.mean_points.len()
    }

    pub fn modes(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Checks the structural invariants of a loaded or hand-built model.
    pub fn validate(&self) -> Result<(), SsmError> {
        let n = self.point_count();
        if self.basis.nrows() != 3 * n || self.basis.ncols() != self.modes() {
            return Err(SsmError::DimensionMismatch(format!(
                "basis is {}x{}, expected {}x{}",
                self.basis.nrows(),
                self.basis.ncols(),
                3 * n,
                self.modes()
            )));
        }
        if self.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(SsmError::DimensionMismatch("eigenvalues must be positive".into()));
        }
        if self.eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(SsmError::DimensionMismatch(
                "eigenvalues must be sorted descending".into(),
            ));
        }
        let gram = self.basis.transpose() * &self.basis;
        let err = (gram - DMatrix::<f64>::identity(self.modes(), self.modes())).amax();
        if err > 1e-8 {
            return Err(SsmError::DimensionMismatch(format!(
                "basis columns not orthonormal (max deviation {err:.2e})"
            )));
        }
        self.annotations.validate(n)?;
        Ok(())
    }

    fn check_params(&self, params: &PoseShapeParams) -> Result<(), SsmError> {
        if params.coeffs.len() != self.modes() {
            return Err(SsmError::DimensionMismatch(format!(
                "{} coefficients for a {}-mode model",
                params.coeffs.len(),
                self.modes()
            )));
        }
        Ok(())
    }

    /// Shape in the model frame, `X_i + W_i c`.
    pub fn deformed(&self, coeffs: &[f64]) -> Result<Vec<Vec3>, SsmError> {
        if coeffs.len() != self.modes() {
            return Err(SsmError::DimensionMismatch(format!(
                "{} coefficients for a {}-mode model",
                coeffs.len(),
                self.modes()
            )));
        }
        let c = DVector::from_column_slice(coeffs);
        let offsets = &self.basis * c;
        Ok(self
            .mean_points
            .iter()
            .enumerate()
            .map(|(i, p)| p + Vec3::new(offsets[3 * i], offsets[3 * i + 1], offsets[3 * i + 2]))
            .collect())
    }

    /// Per-mode bound `3 sqrt(lambda_k)`.
    pub fn coefficient_bounds(&self) -> Vec<f64> {
        self.eigenvalues
            .iter()
            .map(|l| COEFF_SIGMA_BOUND * l.sqrt())
            .collect()
    }

    /// Projects coefficients onto the `|c_k| <= 3 sqrt(lambda_k)` box.
    pub fn clamp_coefficients(&self, coeffs: &mut [f64]) {
        for (c, b) in coeffs.iter_mut().zip(self.coefficient_bounds()) {
            *c = c.clamp(-b, b);
        }
    }
}

/// `X'_i = R (X_i + W_i c) + t` for every model point.
pub fn instantiate(model: &ShapeModel, params: &PoseShapeParams) -> Result<Vec<Vec3>, SsmError> {
    model.check_params(params)?;
    let r = params.pose.rotation_matrix();
    let t = params.pose.translation;
    Ok(model
        .deformed(&params.coeffs)?
        .iter()
        .map(|p| r * p + t)
        .collect())
}

/// Dense Jacobian of output point `index` w.r.t. `[rotation, translation, coeffs]`.
pub fn point_jacobian(
    model: &ShapeModel,
    params: &PoseShapeParams,
    index: usize,
) -> Result<DMatrix<f64>, SsmError> {
    model.check_params(params)?;
    let k = model.modes();
    let r = params.pose.rotation_matrix();
    let local = model.deformed(&params.coeffs)?[index];
    let dr = so3_exp_derivatives(&params.pose.rotation);
    let mut jac = DMatrix::zeros(3, 6 + k);
    for (j, d) in dr.iter().enumerate() {
        jac.fixed_view_mut::<3, 1>(0, j).copy_from(&(d * local));
    }
    jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
    let rows = model.basis.rows(3 * index, 3);
    let block = r * rows;
    jac.view_mut((0, 6), (3, k)).copy_from(&block);
    Ok(jac)
}

/// Pulls per-point gradients `dL/dX'_i` (and optionally `dL/dR`, the
/// gradient w.r.t. the full rotation matrix) back onto the flat parameter
/// vector `[rotation, translation, coeffs]`.
pub fn pullback(
    model: &ShapeModel,
    params: &PoseShapeParams,
    point_grads: &[Vec3],
    rotation_matrix_grad: Option<&Mat3>,
) -> Result<Vec<f64>, SsmError> {
    model.check_params(params)?;
    let n = model.point_count();
    if point_grads.len() != n {
        return Err(SsmError::DimensionMismatch(format!(
            "{} point gradients for {n} points",
            point_grads.len()
        )));
    }
    let r = params.pose.rotation_matrix();
    let local = model.deformed(&params.coeffs)?;
    // dL/dR accumulated as a full matrix: sum_i g_i (X_i + W_i c)^T.
    let mut d_r = rotation_matrix_grad.copied().unwrap_or_else(Mat3::zeros);
    let mut d_t = Vec3::zeros();
    let mut local_grads = DVector::zeros(3 * n);
    for (i, (g, p)) in point_grads.iter().zip(&local).enumerate() {
        d_r += g * p.transpose();
        d_t += g;
        let gl = r.transpose() * g;
        local_grads[3 * i] = gl.x;
        local_grads[3 * i + 1] = gl.y;
        local_grads[3 * i + 2] = gl.z;
    }
    let dr = so3_exp_derivatives(&params.pose.rotation);
    let mut out = Vec::with_capacity(6 + model.modes());
    out.extend(dr.iter().map(|d| d.component_mul(&d_r).sum()));
    out.extend(d_t.iter());
    out.extend((model.basis.transpose() * local_grads).iter());
    Ok(out)
}

/// Fraction of the training variance captured by the first `k` modes.
pub fn explained_variance(model: &ShapeModel, k: usize) -> Result<f64, SsmError> {
    if k == 0 || k > model.modes() {
        return Err(SsmError::OutOfRange(format!(
            "k must be in 1..={}, got {k}",
            model.modes()
        )));
    }
    if model.total_variance <= 0.0 {
        return Ok(1.0);
    }
    let captured: f64 = model.eigenvalues[..k]
        .iter()
        .filter(|&&l| l > EIGENVALUE_FLOOR)
        .sum();
    Ok((captured / model.total_variance).min(1.0))
}

/// Landmark and trajectory endpoint positions for an instance.
pub fn annotation_positions(
    model: &ShapeModel,
    params: &PoseShapeParams,
) -> Result<AnnotationPositions, SsmError> {
    let pts = instantiate(model, params)?;
    Ok(positions_from_points(&model.annotations, &pts))
}

pub fn positions_from_points(ann: &Annotations, pts: &[Vec3]) -> AnnotationPositions {
    let pick = |idx: &[usize]| idx.iter().map(|&i| pts[i]).collect::<Vec<_>>();
    AnnotationPositions {
        landmarks: pick(&ann.landmarks),
        backup_landmarks: pick(&ann.backup_landmarks),
        left_trajectory: (pts[ann.left_trajectory.entry], pts[ann.left_trajectory.exit]),
        right_trajectory: (pts[ann.right_trajectory.entry], pts[ann.right_trajectory.exit]),
    }
}

/// Rigid ICP of `src` onto `dst` using brute-force nearest neighbours.
///
/// Utility for bringing external meshes into rough correspondence before
/// model building; not used by the fitting pipeline.
pub fn icp_rigid(
    src: &[Vec3],
    dst: &[Vec3],
    max_iters: usize,
) -> Result<RigidTransform, GeometryError> {
    let mut current = RigidTransform::identity();
    let mut last = f64::INFINITY;
    for _ in 0..max_iters {
        let moved: Vec<Vec3> = src.iter().map(|p| current.apply(p)).collect();
        let matched: Vec<Vec3> = moved
            .iter()
            .map(|p| {
                *dst.iter()
                    .min_by(|a, b| (*a - p).norm_squared().total_cmp(&(*b - p).norm_squared()))
                    .expect("non-empty target")
            })
            .collect();
        let step = rigid_align(&moved, &matched)?;
        current = step.transform.compose(&current);
        if (last - step.rms).abs() < 1e-10 {
            break;
        }
        last = step.rms;
    }
    Ok(current)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Annotations over the first 24 indices, valid for any shape with >= 24 points.
    pub fn simple_annotations() -> Annotations {
        Annotations {
            landmarks: (0..10).collect(),
            backup_landmarks: (10..15).collect(),
            left_trajectory: TrajectoryIndices { entry: 15, exit: 16 },
            right_trajectory: TrajectoryIndices { entry: 17, exit: 18 },
            left_pedicle: vec![19, 20],
            right_pedicle: vec![21, 22, 23],
        }
    }

    pub fn random_shape(rng: &mut impl rand::Rng, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-15.0..15.0),
                    rng.random_range(-10.0..10.0),
                )
            })
            .collect()
    }

    /// Base shape plus `dims` fixed random displacement fields with random weights.
    pub fn latent_family(seed: u64, count: usize, n: usize, dims: usize) -> Vec<Vec<Vec3>> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let base = random_shape(&mut rng, n);
        let fields: Vec<Vec<Vec3>> = (0..dims)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        Vec3::new(
                            StandardNormal.sample(&mut rng),
                            StandardNormal.sample(&mut rng),
                            StandardNormal.sample(&mut rng),
                        )
                    })
                    .collect()
            })
            .collect();
        (0..count)
            .map(|_| {
                let z: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect();
                base.iter()
                    .enumerate()
                    .map(|(i, b)| {
                        b + fields
                            .iter()
                            .zip(&z)
                            .map(|(f, w)| f[i] * (*w * 0.5))
                            .sum::<Vec3>()
                    })
                    .collect()
            })
            .collect()
    }
}
