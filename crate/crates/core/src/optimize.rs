//! Landmark-based initialisation and gradient-based refinement of pose and
//! shape against multi-view radiographs.
//!
//! The loss chain is `params -> instantiate -> Gaussian cloud -> render per
//! view -> (pool) -> similarity`. Splat covariances are computed once on the
//! model's mean shape and carried along by the pose rotation, so the image is
//! a smooth function of all parameters and the gradient is exact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rigid_align, triangulate_point, CameraView, GeometryError, Mat3, RigidTransform, Vec2, Vec3};
use crate::image::Image;
use crate::similarity::{MetricKind, Polarity, SimilarityError, ViewPairBatch};
use crate::splat::{
    cloud_from_points_with, render_backward_with, render_with, CloudGradients, CloudParams, GaussianCloud,
    RenderOptions, SplatError, DEFAULT_DILATION,
};
use crate::ssm::{instantiate, pullback, PoseShapeParams, ShapeModel, SsmError, BACKUP_CENTROID_ID};

/// Smallest number of landmarks shared by two views for triangulation.
pub const MIN_COMMON_LANDMARKS: usize = 3;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("view {view}: image is {found:?}, camera expects {expected:?}")]
    ImageSize {
        view: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("only {found} landmarks shared by views 0 and 1 (need {MIN_COMMON_LANDMARKS})")]
    InsufficientLandmarks { found: usize },
    #[error("initialisation failed: {0}")]
    FailedInit(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("landmark id {0} is not annotated on the model")]
    UnknownLandmark(usize),
    #[error(transparent)]
    Model(#[from] SsmError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Render(#[from] SplatError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

/// One detected 2D landmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandmarkObservation {
    pub id: usize,
    pub u: f64,
    pub v: f64,
    pub confidence: f64,
}

impl LandmarkObservation {
    pub fn pixel(&self) -> Vec2 {
        Vec2::new(self.u, self.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewLabel {
    Ap,
    Lat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitView {
    pub camera: CameraView,
    /// Observed radiograph, already in bone-bright polarity.
    pub image: Image,
    pub landmarks: Vec<LandmarkObservation>,
    pub label: Option<ViewLabel>,
}

impl FitView {
    pub fn landmark(&self, id: usize) -> Option<&LandmarkObservation> {
        self.landmarks.iter().find(|l| l.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Adam step size for the axis-angle rotation (rad).
    pub rotation_step: f64,
    /// Adam step size for the translation (mm).
    pub translation_step: f64,
    /// Adam step size for mode `k` is `shape_step * sqrt(eigenvalue_k)`.
    pub shape_step: f64,
    /// Fraction of `max_iters` spent on pose only.
    pub pose_only_fraction: f64,
    /// Absolute loss change counted as a plateau.
    pub plateau_tolerance: f64,
    pub plateau_window: usize,
    /// Number of pyramid levels; level `l` (coarsest first) pools by `2^(levels-1-l)`.
    pub pyramid_levels: usize,
    /// Step-size multiplier applied per pyramid level, compounding toward the finest.
    pub level_step_decay: f64,
    pub deterministic: bool,
    pub metric: MetricKind,
    pub polarity: Polarity,
    pub dilation: f64,
    pub splat_neighbors: usize,
    pub splat_thickness: f64,
    pub splat_scale: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            rotation_step: 0.01,
            translation_step: 0.5,
            shape_step: 0.05,
            pose_only_fraction: 0.3,
            plateau_tolerance: 1e-6,
            plateau_window: 20,
            pyramid_levels: 3,
            level_step_decay: 0.5,
            deterministic: true,
            metric: MetricKind::Ncc,
            polarity: Polarity::BoneBright,
            dilation: DEFAULT_DILATION,
            splat_neighbors: 8,
            splat_thickness: 0.3,
            splat_scale: 0.5,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::Config(m.into()));
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1");
        }
        for (name, v) in [
            ("rotation_step", self.rotation_step),
            ("translation_step", self.translation_step),
            ("shape_step", self.shape_step),
            ("level_step_decay", self.level_step_decay),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FitError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.pose_only_fraction) {
            return bad("pose_only_fraction must be in [0, 1)");
        }
        if !(self.plateau_tolerance >= 0.0) || self.plateau_window < 1 {
            return bad("plateau rule needs tolerance >= 0 and window >= 1");
        }
        if !(1..=6).contains(&self.pyramid_levels) {
            return bad("pyramid_levels must be in 1..=6");
        }
        if !(self.dilation >= 0.0) {
            return bad("dilation must be non-negative");
        }
        Ok(())
    }

    pub fn cloud_params(&self) -> CloudParams {
        CloudParams {
            neighbors: self.splat_neighbors,
            thickness_ratio: self.splat_thickness,
            scale: self.splat_scale,
        }
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            dilation: self.dilation,
        }
    }

    pub fn level_factor(&self, level: usize) -> usize {
        1 << (self.pyramid_levels - 1 - level)
    }
}

/// Splat covariances of the model's mean shape.
pub fn template_covariances(model: &ShapeModel, config: &FitConfig) -> Result<Vec<Mat3>, FitError> {
    Ok(cloud_from_points_with(&model.mean_points, &config.cloud_params())?.covariances)
}

/// Unit-weight splat cloud of one instance: template covariances rotated by
/// the pose, means at the instance points.
pub fn model_cloud(
    model: &ShapeModel,
    template_covariances: &[Mat3],
    params: &PoseShapeParams,
) -> Result<GaussianCloud, FitError> {
    let means = instantiate(model, params)?;
    let r = params.pose.rotation_matrix();
    Ok(GaussianCloud {
        covariances: template_covariances.iter().map(|c| r * c * r.transpose()).collect(),
        weights: vec![1.0; means.len()],
        means,
    })
}

/// Model, observed views and settings for one fit. Construction applies the
/// configured polarity and builds the observed image pyramid.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub model: ShapeModel,
    pub views: Vec<FitView>,
    pub config: FitConfig,
    template_covariances: Vec<Mat3>,
    pyramids: Vec<Vec<Image>>,
}

impl FitProblem {
    pub fn new(model: ShapeModel, mut views: Vec<FitView>, config: FitConfig) -> Result<Self, FitError> {
        config.validate()?;
        model.validate()?;
        if views.len() < 2 {
            return Err(FitError::TooFewViews(views.len()));
        }
        for (view, v) in views.iter_mut().enumerate() {
            v.camera.validate()?;
            let expected = (v.camera.width, v.camera.height);
            if v.image.dims() != expected {
                return Err(FitError::ImageSize {
                    view,
                    expected,
                    found: v.image.dims(),
                });
            }
            v.image = config.polarity.apply(&v.image);
            for l in &v.landmarks {
                if model.annotations.landmark_vertex(l.id).is_none() {
                    return Err(FitError::UnknownLandmark(l.id));
                }
            }
        }
        let template = template_covariances(&model, &config)?;
        let pyramids = views
            .iter()
            .map(|v| {
                (0..config.pyramid_levels)
                    .map(|l| v.image.downsample_mean(config.level_factor(l)))
                    .collect()
            })
            .collect();
        Ok(Self {
            model,
            views,
            config,
            template_covariances: template,
            pyramids,
        })
    }

    pub fn template_covariances(&self) -> &[Mat3] {
        &self.template_covariances
    }

    /// Unit-weight cloud of an instance with pose-rotated template covariances.
    pub fn cloud(&self, params: &PoseShapeParams) -> Result<GaussianCloud, FitError> {
        model_cloud(&self.model, &self.template_covariances, params)
    }

    /// Full-resolution renders of an instance, one per view.
    pub fn render_views(&self, params: &PoseShapeParams) -> Result<Vec<Image>, FitError> {
        let cloud = self.cloud(params)?;
        let opts = self.config.render_options();
        self.views
            .iter()
            .map(|v| Ok(render_with(&cloud, &v.camera, &opts)?.image))
            .collect()
    }

    fn level_batch_inputs(&self, renders: &[Image], level: usize) -> Vec<Image> {
        let f = self.config.level_factor(level);
        renders.iter().map(|r| r.downsample_mean(f)).collect()
    }

    /// Loss at a pyramid level (`pyramid_levels - 1` is full resolution).
    pub fn loss(&self, params: &PoseShapeParams, level: usize) -> Result<f64, FitError> {
        let renders = self.render_views(params)?;
        let pooled = self.level_batch_inputs(&renders, level);
        let batch = ViewPairBatch::new(pooled.iter().collect(), self.pyramids.iter().map(|p| &p[level]).collect())?;
        Ok(self.config.metric.metric().loss(&batch)?)
    }

    /// Loss and its gradient w.r.t. `[rotation, translation, coeffs]`.
    pub fn loss_and_gradient(&self, params: &PoseShapeParams, level: usize) -> Result<(f64, Vec<f64>), FitError> {
        let cloud = self.cloud(params)?;
        let opts = self.config.render_options();
        let renders = self
            .views
            .iter()
            .map(|v| Ok(render_with(&cloud, &v.camera, &opts)?.image))
            .collect::<Result<Vec<_>, FitError>>()?;
        let pooled = self.level_batch_inputs(&renders, level);
        let batch = ViewPairBatch::new(pooled.iter().collect(), self.pyramids.iter().map(|p| &p[level]).collect())?;
        let lg = self.config.metric.metric().loss_and_grad(&batch)?;
        let f = self.config.level_factor(level);
        let mut total = CloudGradients::zeros(cloud.len());
        for (v, g) in self.views.iter().zip(&lg.grads) {
            let up = Image::downsample_mean_adjoint(g, f, v.camera.width, v.camera.height);
            total.add_assign(&render_backward_with(&cloud, &v.camera, &up, &opts)?);
        }
        let r = params.pose.rotation_matrix();
        let mut d_r = Mat3::zeros();
        for (g, c) in total.covariances.iter().zip(&self.template_covariances) {
            d_r += 2.0 * g * r * c;
        }
        let grad = pullback(&self.model, params, &total.means, Some(&d_r))?;
        Ok((lg.loss, grad))
    }

    /// Mean-shape position of a landmark id (primary `0..10`, backup `10..15`).
    pub fn model_landmark(&self, id: usize) -> Result<Vec3, FitError> {
        let vi = self.model.annotations.landmark_vertex(id).ok_or(FitError::UnknownLandmark(id))?;
        Ok(self.model.mean_points[vi])
    }
}

/// Pose from landmarks shared by views 0 and 1: triangulate each common id
/// and rigidly align the mean-shape landmarks onto them.
pub fn init_from_landmarks(problem: &FitProblem) -> Result<RigidTransform, FitError> {
    let (a, b) = (&problem.views[0], &problem.views[1]);
    let mut ids: Vec<usize> = a
        .landmarks
        .iter()
        .map(|l| l.id)
        .filter(|id| b.landmark(*id).is_some())
        .collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < MIN_COMMON_LANDMARKS {
        return Err(FitError::InsufficientLandmarks { found: ids.len() });
    }
    let mut src = Vec::with_capacity(ids.len());
    let mut dst = Vec::with_capacity(ids.len());
    for id in ids {
        let pa = a.landmark(id).expect("filtered").pixel();
        let pb = b.landmark(id).expect("filtered").pixel();
        dst.push(triangulate_point(&pa, &a.camera, &pb, &b.camera)?.point);
        src.push(problem.model_landmark(id)?);
    }
    Ok(rigid_align(&src, &dst)?.transform)
}

/// Pose from the backup centroid and the canonical AP/LAT orientations.
///
/// Model axes: `+y` anterior, `+z` superior, `+x = y × z`. Anterior is the
/// reverse of the AP viewing direction; superior is the mean image-up
/// direction of both views, orthogonalised against anterior.
pub fn init_backup(problem: &FitProblem, labels: &[ViewLabel]) -> Result<RigidTransform, FitError> {
    if labels.len() != problem.views.len() {
        return Err(FitError::FailedInit(format!(
            "{} view labels for {} views",
            labels.len(),
            problem.views.len()
        )));
    }
    let find = |want| {
        labels
            .iter()
            .position(|l| *l == want)
            .ok_or_else(|| FitError::FailedInit(format!("no view labelled {want:?}")))
    };
    let (ia, il) = (find(ViewLabel::Ap)?, find(ViewLabel::Lat)?);
    let (ap, lat) = (&problem.views[ia], &problem.views[il]);
    let centroid_px = |v: &FitView| {
        v.landmark(BACKUP_CENTROID_ID)
            .map(|l| l.pixel())
            .ok_or_else(|| FitError::FailedInit("centroid landmark missing".into()))
    };
    let centroid = triangulate_point(&centroid_px(ap)?, &ap.camera, &centroid_px(lat)?, &lat.camera)?.point;
    let anterior = -ap.camera.view_direction();
    let up = ap.camera.up_direction() + lat.camera.up_direction();
    let superior = (up - anterior * up.dot(&anterior))
        .try_normalize(1e-9)
        .ok_or_else(|| FitError::FailedInit("image-up directions are parallel to the AP axis".into()))?;
    let lateral = anterior.cross(&superior);
    let r = Mat3::from_columns(&[lateral, anterior, superior]);
    let model_centroid = problem.model_landmark(BACKUP_CENTROID_ID)?;
    Ok(RigidTransform::from_matrix(&r, centroid - r * model_centroid))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitStatus {
    Converged,
    MaxIters,
    Failed,
    FailedInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub phase: usize,
    pub level: usize,
    pub pose_only: bool,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: PoseShapeParams,
    /// Full-resolution loss of the initial parameters.
    pub initial_loss: f64,
    /// Full-resolution loss of the returned parameters.
    pub final_loss: f64,
    pub trace: Vec<TraceEntry>,
    pub status: FitStatus,
    pub iterations: usize,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, Copy)]
struct Phase {
    level: usize,
    pose_only: bool,
    budget: usize,
}

fn schedule(cfg: &FitConfig) -> Vec<Phase> {
    let pose_iters = (cfg.pose_only_fraction * cfg.max_iters as f64).round() as usize;
    let rest = cfg.max_iters - pose_iters.min(cfg.max_iters);
    let levels = cfg.pyramid_levels;
    let mut phases = Vec::new();
    if pose_iters > 0 {
        phases.push(Phase {
            level: 0,
            pose_only: true,
            budget: pose_iters,
        });
    }
    for level in 0..levels {
        let budget = rest / levels + usize::from(level < rest % levels);
        phases.push(Phase {
            level,
            pose_only: false,
            budget,
        });
    }
    phases.retain(|p| p.budget > 0);
    phases
}

/// Fit from a rigid initialisation with mean shape.
pub fn fit(problem: &FitProblem, init: &RigidTransform) -> FitResult {
    fit_from(problem, &PoseShapeParams::new(*init, vec![0.0; problem.model.modes()]))
}

/// Adam over `[rotation, translation, coeffs]` with a pose-only stage and a
/// coarse-to-fine pyramid. Returns the iterate with the lowest
/// full-resolution loss seen (the initial parameters included).
pub fn fit_from(problem: &FitProblem, init: &PoseShapeParams) -> FitResult {
    let cfg = &problem.config;
    let k = problem.model.modes();
    let finest = cfg.pyramid_levels - 1;
    let mut params = init.clone();
    problem.model.clamp_coefficients(&mut params.coeffs);
    let failed = |params: PoseShapeParams, initial_loss, final_loss, trace, iterations, msg: String| FitResult {
        params,
        initial_loss,
        final_loss,
        trace,
        status: FitStatus::Failed,
        iterations,
        diagnostic: Some(msg),
    };
    let initial_loss = match problem.loss(&params, finest) {
        Ok(l) if l.is_finite() => l,
        Ok(l) => return failed(params, l, l, Vec::new(), 0, format!("initial loss is {l}")),
        Err(e) => return failed(params, f64::NAN, f64::NAN, Vec::new(), 0, e.to_string()),
    };
    let mut best = (initial_loss, params.clone());

    let mut lr = vec![cfg.rotation_step; 3];
    lr.extend([cfg.translation_step; 3]);
    lr.extend(problem.model.eigenvalues.iter().map(|l| cfg.shape_step * l.max(0.0).sqrt()));
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let dof = 6 + k;
    let mut m = vec![0.0; dof];
    let mut v = vec![0.0; dof];
    let mut steps = vec![0i32; dof];

    let phases = schedule(cfg);
    let mut trace = Vec::new();
    let mut iteration = 0;
    let mut plateau = 0usize;
    let mut prev: Option<(usize, f64)> = None;
    let mut status = FitStatus::MaxIters;
    'phases: for (pi, phase) in phases.iter().enumerate() {
        let last_phase = pi + 1 == phases.len();
        let scale = cfg.level_step_decay.powi(phase.level as i32);
        let active = if phase.pose_only { 6 } else { dof };
        for it in 0..phase.budget {
            let (loss, grad) = match problem.loss_and_gradient(&params, phase.level) {
                Ok(r) => r,
                Err(e) => {
                    return failed(best.1, initial_loss, best.0, trace, iteration, e.to_string());
                }
            };
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                let msg = format!("non-finite loss or gradient at iteration {iteration} (loss {loss})");
                return failed(best.1, initial_loss, best.0, trace, iteration, msg);
            }
            trace.push(TraceEntry {
                iteration,
                phase: pi,
                level: phase.level,
                pose_only: phase.pose_only,
                loss,
            });
            if phase.level == finest && loss < best.0 {
                best = (loss, params.clone());
            }
            if let Some((level, p)) = prev {
                if level == phase.level {
                    if (loss - p).abs() < cfg.plateau_tolerance {
                        plateau += 1;
                    } else {
                        plateau = 0;
                    }
                }
            }
            prev = Some((phase.level, loss));
            iteration += 1;
            if plateau >= cfg.plateau_window && it > 0 {
                if last_phase {
                    status = FitStatus::Converged;
                    break 'phases;
                }
                continue 'phases;
            }
            // Adam normalises away the gradient scale, so a stationary
            // point would still be left at full step size. Skip updates whose
            // first-order effect on the loss is below the plateau tolerance.
            let reach: f64 = (0..active).map(|j| grad[j].abs() * scale * lr[j]).sum();
            if reach < cfg.plateau_tolerance {
                continue;
            }
            let mut x = params.to_vector();
            for j in 0..active {
                steps[j] += 1;
                m[j] = b1 * m[j] + (1.0 - b1) * grad[j];
                v[j] = b2 * v[j] + (1.0 - b2) * grad[j] * grad[j];
                let mh = m[j] / (1.0 - b1.powi(steps[j]));
                let vh = v[j] / (1.0 - b2.powi(steps[j]));
                x[j] -= scale * lr[j] * mh / (vh.sqrt() + eps);
            }
            params = PoseShapeParams::from_vector(&x);
            problem.model.clamp_coefficients(&mut params.coeffs);
        }
    }
    // The last update of a budget-limited run has not been scored yet.
    if status == FitStatus::MaxIters {
        match problem.loss(&params, finest) {
            Ok(l) if l.is_finite() && l < best.0 => best = (l, params.clone()),
            Ok(_) => {}
            Err(e) => return failed(best.1, initial_loss, best.0, trace, iteration, e.to_string()),
        }
    }
    FitResult {
        params: best.1,
        initial_loss,
        final_loss: best.0,
        trace,
        status,
        iterations: iteration,
        diagnostic: None,
    }
}
