//! `phantom`, `build-ssm` and `drr`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use vertplan_core::eval::{generate_phantoms_with, raycast_drr, DrrObject, PhantomConfig};
use vertplan_core::geometry::{RigidTransform, Vec3};
use vertplan_core::image::write_image;
use vertplan_core::io::{
    read_json, read_model, read_ply, write_camera, write_json, write_landmarks, write_model, write_ply,
    LineAnnotations,
};
use vertplan_core::mesh::TriangleMesh;
use vertplan_core::optimize::{model_cloud, template_covariances};
use vertplan_core::scenario::{add_pixel_noise, perturb_pose, project_landmarks, project_segment};
use vertplan_core::splat::render_with;
use vertplan_core::ssm::{build_model, instantiate, Annotations, PoseShapeParams, Side};

use super::{eval_error, fit_error, require, ssm_error};
use crate::config::Renderer;
use crate::error::{Category, CliError, ResultExt};
use crate::manifest::RunContext;

const HELD_OUT_STREAM: u64 = 1;
const POSE_STREAM: u64 = 2;
const IMAGE_NOISE_STREAM: u64 = 3;
const LANDMARK_STREAM: u64 = 4;
const LINE_STREAM: u64 = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilySummary {
    pub seed: u64,
    pub latent_dims: usize,
    pub config: PhantomConfig,
    pub latents: Vec<Vec<f64>>,
}

/// Ground truth of one held-out case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseTruth {
    pub latent: Vec<f64>,
    /// Pose applied to the phantom-frame shape.
    pub pose: RigidTransform,
}

pub fn phantom(ctx: &mut RunContext) -> Result<(), CliError> {
    let cfg = ctx.config.phantom.clone();
    let family = generate_phantoms_with(ctx.seed(), cfg.count, cfg.latent_dims, &cfg.phantom_config());
    for (i, shape) in family.samples.iter().enumerate() {
        write_ply(&ctx.output(&format!("training/shape_{i:03}.ply"))?, shape, family.faces())?;
    }
    write_json(&ctx.output("annotations.json")?, family.annotations())?;
    write_json(
        &ctx.output("family.json")?,
        &FamilySummary {
            seed: family.seed,
            latent_dims: family.latent_dims,
            config: family.config,
            latents: family.latents.clone(),
        },
    )?;
    let mut rng = ctx.rng(POSE_STREAM);
    for (i, (latent, points)) in family.held_out(HELD_OUT_STREAM, cfg.cases).into_iter().enumerate() {
        let angle = rng.random_range(0.0..=cfg.max_rotation_deg);
        let shift = rng.random_range(0.0..=cfg.max_translation_mm);
        let pose = perturb_pose(&RigidTransform::identity(), angle, shift, &mut rng);
        let posed: Vec<Vec3> = points.iter().map(|p| pose.apply(p)).collect();
        let dir = format!("cases/case_{i:03}");
        write_ply(&ctx.output(&format!("{dir}/truth.ply"))?, &posed, family.faces())?;
        write_json(&ctx.output(&format!("{dir}/truth.json"))?, &CaseTruth { latent, pose })?;
    }
    println!(
        "wrote {} training shapes and {} cases to {}",
        cfg.count,
        cfg.cases,
        ctx.out_dir.display()
    );
    Ok(())
}

fn ply_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .context(Category::Io, &format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")))
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Debug, Clone, Serialize)]
struct BuildSummary {
    training_shapes: usize,
    points: usize,
    modes: usize,
    eigenvalues: Vec<f64>,
    spectrum: Vec<f64>,
    explained: Vec<f64>,
    procrustes_iterations: usize,
}

pub fn build_ssm(ctx: &mut RunContext, training: &Path, annotations: &Path) -> Result<(), CliError> {
    let files = ply_files(training)?;
    if files.len() < 2 {
        return Err(CliError::new(
            Category::Input,
            format!("{} holds {} .ply shapes, need at least 2", training.display(), files.len()),
        ));
    }
    let mut shapes = Vec::with_capacity(files.len());
    let mut faces = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let (v, fc) = read_ply(ctx.input(f)?)?;
        if i == 0 {
            faces = fc;
        } else if fc != faces {
            return Err(CliError::new(
                Category::Input,
                format!("{} has a different face list; shapes must share topology", f.display()),
            ));
        }
        shapes.push(v);
    }
    let ann: Annotations = read_json(ctx.input(annotations)?)?;
    let ssm = &ctx.config.ssm;
    let (model, report) = build_model(&shapes, ssm.modes, ann, faces, ssm.region_label.clone()).map_err(ssm_error)?;
    write_model(&ctx.output("model.json")?, &model)?;
    write_ply(&ctx.output("mean.ply")?, &model.mean_points, &model.faces)?;
    write_json(
        &ctx.output("build_report.json")?,
        &BuildSummary {
            training_shapes: shapes.len(),
            points: model.point_count(),
            modes: model.modes(),
            eigenvalues: model.eigenvalues.clone(),
            spectrum: report.spectrum,
            explained: report.explained.clone(),
            procrustes_iterations: report.procrustes_iterations,
        },
    )?;
    println!(
        "model: {} shapes, {} points, {} modes, explained variance {:.4}",
        shapes.len(),
        model.point_count(),
        model.modes(),
        report.explained.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

pub fn drr(
    ctx: &mut RunContext,
    mesh: Option<&Path>,
    annotations: Option<&Path>,
    model: Option<&Path>,
    params: Option<&Path>,
) -> Result<(), CliError> {
    let d = ctx.config.drr.clone();
    let (points, faces, ann, cloud) = match (mesh, model) {
        (Some(m), None) => {
            let (v, f) = read_ply(ctx.input(m)?)?;
            let ann: Option<Annotations> = match annotations {
                Some(a) => Some(read_json(ctx.input(a)?)?),
                None => None,
            };
            (v, f, ann, None)
        }
        (None, Some(m)) => {
            let model = read_model(ctx.input(m)?)?;
            let params: PoseShapeParams = read_json(ctx.input(require(params, "--params")?)?)?;
            let points = instantiate(&model, &params).map_err(ssm_error)?;
            let cloud = match d.renderer {
                Renderer::Splat => {
                    let covs = template_covariances(&model, &ctx.config.fit).map_err(fit_error)?;
                    Some(model_cloud(&model, &covs, &params).map_err(fit_error)?)
                }
                Renderer::Raycast => None,
            };
            (points, model.faces.clone(), Some(model.annotations.clone()), cloud)
        }
        _ => return Err(CliError::new(Category::Usage, "give exactly one of --mesh or --model")),
    };
    if d.renderer == Renderer::Splat && cloud.is_none() {
        return Err(CliError::new(Category::Usage, "the splat renderer needs --model and --params"));
    }
    if let Some(a) = &ann {
        a.validate(points.len()).map_err(ssm_error)?;
    }
    let mesh = TriangleMesh::new(points, faces);
    if cloud.is_none() && mesh.is_empty() {
        return Err(CliError::new(Category::Input, "mesh has no faces to ray cast"));
    }
    let cams = d
        .rig()
        .pair(&d.isocenter(), d.separation_deg)
        .context(Category::Geometry, "camera rig")?;
    let mut noise_rng = ctx.rng(IMAGE_NOISE_STREAM);
    let mut landmark_rng = ctx.rng(LANDMARK_STREAM);
    let mut line_rng = ctx.rng(LINE_STREAM);
    for (i, cam) in cams.iter().enumerate() {
        let mut img = match &cloud {
            Some(c) => render_with(c, cam, &ctx.config.fit.render_options())
                .context(Category::Geometry, "splat render")?
                .image
                .scaled(d.density),
            None => raycast_drr(DrrObject::Mesh(&mesh), cam, d.density).map_err(eval_error)?,
        };
        let sigma = d.image_noise * img.max();
        add_pixel_noise(&mut img, sigma, &mut noise_rng);
        write_camera(&ctx.output(&format!("camera_{i}.json"))?, cam)?;
        let name = format!("view_{i}.{}", d.image_format);
        write_image(&ctx.output(&name)?, &img)?;
        ctx.output(&format!("{name}.norm"))?;
        if let Some(a) = &ann {
            let lms = project_landmarks(a, &mesh.vertices, cam, d.landmark_noise_px, &mut landmark_rng)
                .context(Category::Geometry, "projecting landmarks")?;
            write_landmarks(&ctx.output(&format!("landmarks_{i}.csv"))?, &lms)?;
            let mut lines = LineAnnotations::default();
            for side in Side::BOTH {
                let t = a.trajectory(side);
                let seg = project_segment(&mesh.vertices[t.entry], &mesh.vertices[t.exit], cam, d.line_noise_px, &mut line_rng)
                    .context(Category::Geometry, "projecting trajectory")?;
                lines.set(side, seg);
            }
            write_json(&ctx.output(&format!("lines_{i}.json"))?, &lines)?;
        }
    }
    println!("rendered {} views into {}", cams.len(), ctx.out_dir.display());
    Ok(())
}
