//! Subcommand implementations.

pub mod data;
pub mod eval;
pub mod fit;
pub mod plan;

use std::path::{Path, PathBuf};

use vertplan_core::eval::EvalError;
use vertplan_core::geometry::CameraView;
use vertplan_core::image::{read_image, sidecar_path, Image};
use vertplan_core::io::read_camera;
use vertplan_core::optimize::{FitError, LandmarkObservation};
use vertplan_core::planning::PlanError;
use vertplan_core::ssm::SsmError;

use crate::error::{Category, CliError};
use crate::manifest::RunContext;

/// One `--views` entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSpec {
    pub camera: PathBuf,
    pub image: Option<PathBuf>,
    pub landmarks: Option<PathBuf>,
}

pub fn parse_views(specs: &[String]) -> Result<Vec<ViewSpec>, CliError> {
    specs
        .iter()
        .map(|s| {
            let parts: Vec<&str> = s.split(':').collect();
            if parts.is_empty() || parts.len() > 3 || parts[0].is_empty() {
                return Err(CliError::new(
                    Category::Usage,
                    format!("--views entry {s:?} is not camera[:image[:landmarks]]"),
                ));
            }
            let opt = |i: usize| parts.get(i).filter(|p| !p.is_empty()).map(PathBuf::from);
            Ok(ViewSpec {
                camera: PathBuf::from(parts[0]),
                image: opt(1),
                landmarks: opt(2),
            })
        })
        .collect()
}

pub struct LoadedView {
    pub camera: CameraView,
    pub image: Option<Image>,
    pub landmarks: Vec<LandmarkObservation>,
}

pub fn load_view(ctx: &mut RunContext, spec: &ViewSpec) -> Result<LoadedView, CliError> {
    let camera = read_camera(ctx.input(&spec.camera)?)?;
    camera.validate().map_err(|e| CliError::new(Category::Input, format!("{}: {e}", spec.camera.display())))?;
    let image = match &spec.image {
        Some(p) => {
            let side = sidecar_path(p);
            if side.exists() {
                ctx.input(&side)?;
            }
            Some(read_image(ctx.input(p)?)?)
        }
        None => None,
    };
    let landmarks = match &spec.landmarks {
        Some(p) => vertplan_core::io::read_landmarks(ctx.input(p)?)?,
        None => Vec::new(),
    };
    Ok(LoadedView {
        camera,
        image,
        landmarks,
    })
}

pub fn require<'a>(path: Option<&'a Path>, flag: &str) -> Result<&'a Path, CliError> {
    path.ok_or_else(|| CliError::new(Category::Usage, format!("{flag} is required")))
}

pub fn fit_error(e: FitError) -> CliError {
    let category = match e {
        FitError::TooFewViews(_) | FitError::ImageSize { .. } | FitError::UnknownLandmark(_) => Category::Input,
        FitError::Config(_) => Category::Config,
        FitError::Geometry(_) => Category::Geometry,
        _ => Category::Fit,
    };
    CliError::new(category, e.to_string())
}

pub fn plan_error(e: PlanError) -> CliError {
    let category = match e {
        PlanError::Degenerate(_) | PlanError::ShortSegment { .. } | PlanError::Camera(_) => Category::Geometry,
        _ => Category::Input,
    };
    CliError::new(category, e.to_string())
}

pub fn ssm_error(e: SsmError) -> CliError {
    CliError::new(Category::Input, e.to_string())
}

pub fn eval_error(e: EvalError) -> CliError {
    let category = match e {
        EvalError::Io(_) => Category::Io,
        EvalError::Camera(_) => Category::Geometry,
        _ => Category::Input,
    };
    CliError::new(category, e.to_string())
}
