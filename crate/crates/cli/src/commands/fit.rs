//! `fit`.

use std::path::Path;

use serde::Serialize;
use vertplan_core::geometry::RigidTransform;
use vertplan_core::io::{read_json, read_model, write_json, write_ply};
use vertplan_core::optimize::{
    fit_from, init_backup, init_from_landmarks, FitError, FitProblem, FitResult, FitStatus, FitView,
    ViewLabel,
};
use vertplan_core::ssm::{instantiate, PoseShapeParams};

use super::{fit_error, load_view, ssm_error, ViewSpec};
use crate::error::{Category, CliError};
use crate::manifest::RunContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    Landmarks,
    Backup,
    Given,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub init_method: InitMethod,
    pub init_pose: RigidTransform,
    pub metric: String,
    pub result: FitResult,
}

fn parse_label(s: &str) -> Result<ViewLabel, CliError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "ap" => Ok(ViewLabel::Ap),
        "lat" => Ok(ViewLabel::Lat),
        other => Err(CliError::new(Category::Usage, format!("unknown view label {other:?} (ap or lat)"))),
    }
}

pub fn fit(
    ctx: &mut RunContext,
    model: &Path,
    specs: &[ViewSpec],
    init_params: Option<&Path>,
    labels: &[String],
) -> Result<(), CliError> {
    let model = read_model(ctx.input(model)?)?;
    let labels = labels.iter().map(|s| parse_label(s)).collect::<Result<Vec<_>, _>>()?;
    if !labels.is_empty() && labels.len() != specs.len() {
        return Err(CliError::new(
            Category::Usage,
            format!("{} labels for {} views", labels.len(), specs.len()),
        ));
    }
    let mut views = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let v = load_view(ctx, spec)?;
        let image = v
            .image
            .ok_or_else(|| CliError::new(Category::Usage, format!("view {i} has no image")))?;
        views.push(FitView {
            camera: v.camera,
            image,
            landmarks: v.landmarks,
            label: labels.get(i).copied(),
        });
    }
    let problem = FitProblem::new(model, views, ctx.config.fit.clone()).map_err(fit_error)?;
    let (init_method, start) = match init_params {
        Some(p) => {
            let start: PoseShapeParams = read_json(ctx.input(p)?)?;
            if start.coeffs.len() != problem.model.modes() {
                return Err(CliError::new(
                    Category::Input,
                    format!("{} coefficients for a {}-mode model", start.coeffs.len(), problem.model.modes()),
                ));
            }
            (InitMethod::Given, start)
        }
        None => {
            let (method, pose) = match init_from_landmarks(&problem) {
                Ok(pose) => (InitMethod::Landmarks, pose),
                Err(FitError::InsufficientLandmarks { .. } | FitError::Geometry(_)) if !labels.is_empty() => {
                    (InitMethod::Backup, init_backup(&problem, &labels).map_err(fit_error)?)
                }
                Err(e) => return Err(fit_error(e)),
            };
            (method, PoseShapeParams::new(pose, vec![0.0; problem.model.modes()]))
        }
    };
    let result = fit_from(&problem, &start);
    let init_pose = start.pose;
    let report = FitReport {
        init_method,
        init_pose,
        metric: problem.config.metric.metric().name().into(),
        result,
    };
    write_json(&ctx.output("fit_report.json")?, &report)?;
    write_json(&ctx.output("params.json")?, &report.result.params)?;
    let points = instantiate(&problem.model, &report.result.params).map_err(ssm_error)?;
    write_ply(&ctx.output("fitted.ply")?, &points, &problem.model.faces)?;
    let r = &report.result;
    println!(
        "fit {:?} after {} iterations: loss {:.6} -> {:.6}",
        r.status, r.iterations, r.initial_loss, r.final_loss
    );
    match r.status {
        FitStatus::Converged | FitStatus::MaxIters => Ok(()),
        FitStatus::Failed | FitStatus::FailedInit => Err(CliError::new(
            Category::Fit,
            r.diagnostic.clone().unwrap_or_else(|| format!("{:?}", r.status)),
        )),
    }
}
