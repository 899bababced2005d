//! `plan`, `geoplan` and `overlay`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use vertplan_core::eval::{raycast_drr, DrrObject};
use vertplan_core::image::{read_image, write_image, Image};
use vertplan_core::io::{
    read_camera, read_json, read_model, read_trajectories, write_json, write_trajectories, LineAnnotations,
    TrajectoryRecord,
};
use vertplan_core::mesh::{cylinder_mesh, TriangleMesh};
use vertplan_core::planning::{clearance, geoplan_triangulate, pedicle_points, plan_from_fit};
use vertplan_core::ssm::{instantiate, PoseShapeParams, Side};

use super::{eval_error, plan_error, ssm_error, load_view, ViewSpec};
use crate::error::{Category, CliError};
use crate::manifest::RunContext;

/// Sides of the cylinder prisms drawn by `overlay`.
const CYLINDER_SEGMENTS: usize = 32;
/// Peak opacity of a drawn cannula.
const OVERLAY_OPACITY: f64 = 0.8;

pub fn plan(ctx: &mut RunContext, model: &Path, params: &Path) -> Result<(), CliError> {
    let model = read_model(ctx.input(model)?)?;
    let params: PoseShapeParams = read_json(ctx.input(params)?)?;
    let cfg = ctx.config.plan.clone();
    let plans = plan_from_fit(&model, &params, cfg.diameter).map_err(plan_error)?;
    let points = instantiate(&model, &params).map_err(ssm_error)?;
    let mut records = Vec::with_capacity(2);
    for t in &plans {
        let ped = pedicle_points(&model, &points, t.side);
        let c = clearance(t, &ped, cfg.clearance_threshold).map_err(plan_error)?;
        println!(
            "{:?}: length {:.1} mm, clearance {:.2} mm{}",
            t.side,
            t.length(),
            c.min_axis_distance,
            if c.breach { " (breach)" } else { "" }
        );
        records.push(TrajectoryRecord::new(t, Some(&c)));
    }
    write_trajectories(&ctx.output("trajectories.json")?, &records)
        .map_err(CliError::from)
}

pub fn geoplan(ctx: &mut RunContext, specs: &[ViewSpec], lines: &[PathBuf]) -> Result<(), CliError> {
    if specs.len() != 2 || lines.len() != 2 {
        return Err(CliError::new(
            Category::Usage,
            format!("geoplan needs exactly 2 views and 2 line files, got {} and {}", specs.len(), lines.len()),
        ));
    }
    let mut cams = Vec::with_capacity(2);
    for s in specs {
        cams.push(load_view(ctx, s)?.camera);
    }
    let mut annotations = Vec::with_capacity(2);
    for l in lines {
        let a: LineAnnotations = read_json(ctx.input(l)?)?;
        annotations.push(a);
    }
    let diameter = ctx.config.plan.diameter;
    let mut records = Vec::new();
    let mut outcome = BTreeMap::new();
    for side in Side::BOTH {
        let (Some(a), Some(b)) = (annotations[0].get(side), annotations[1].get(side)) else {
            outcome.insert(format!("{side:?}").to_lowercase(), "missing line annotation".to_string());
            continue;
        };
        match geoplan_triangulate(a, &cams[0], b, &cams[1], side, diameter) {
            Ok(t) => {
                records.push(TrajectoryRecord::new(&t, None));
                outcome.insert(format!("{side:?}").to_lowercase(), "ok".to_string());
            }
            Err(e) => {
                outcome.insert(format!("{side:?}").to_lowercase(), e.to_string());
            }
        }
    }
    write_trajectories(&ctx.output("trajectories.json")?, &records)?;
    write_json(&ctx.output("geoplan_report.json")?, &outcome)?;
    for (side, msg) in &outcome {
        println!("{side}: {msg}");
    }
    if records.is_empty() {
        return Err(CliError::new(
            Category::Geometry,
            format!("no trajectory could be triangulated: {outcome:?}"),
        ));
    }
    Ok(())
}

/// Blends cannula path lengths over the image scaled to `[0, 1]`.
pub fn composite(base: &Image, cannula: &Image, diameter: f64) -> Image {
    let max = base.max();
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let data = base
        .data
        .iter()
        .zip(&cannula.data)
        .map(|(&b, &c)| {
            let m = OVERLAY_OPACITY * (c / diameter).clamp(0.0, 1.0);
            (b * scale).max(0.0) * (1.0 - m) + m
        })
        .collect();
    Image::from_vec(base.width, base.height, data)
}

pub fn overlay(ctx: &mut RunContext, image: &Path, camera: &Path, trajectories: &[PathBuf]) -> Result<(), CliError> {
    let img = read_image(ctx.input(image)?)?;
    let cam = read_camera(ctx.input(camera)?)?;
    if img.dims() != (cam.width, cam.height) {
        return Err(CliError::new(
            Category::Input,
            format!("image is {:?} but the camera expects {:?}", img.dims(), (cam.width, cam.height)),
        ));
    }
    let mut mesh = TriangleMesh::default();
    let mut diameter: f64 = 0.0;
    for p in trajectories {
        for r in read_trajectories(ctx.input(p)?)? {
            let c = cylinder_mesh(r.entry, r.target, r.diameter / 2.0, CYLINDER_SEGMENTS);
            let off = mesh.vertices.len();
            mesh.vertices.extend(c.vertices);
            mesh.faces.extend(c.faces.iter().map(|f| f.map(|i| i + off)));
            diameter = diameter.max(r.diameter);
        }
    }
    if mesh.is_empty() {
        return Err(CliError::new(Category::Input, "no trajectories to draw"));
    }
    let cannula = raycast_drr(DrrObject::Mesh(&mesh), &cam, 1.0).map_err(eval_error)?;
    let out = composite(&img, &cannula, diameter);
    let name = format!("overlay.{}", ctx.config.drr.image_format);
    write_image(&ctx.output(&name)?, &out)?;
    ctx.output(&format!("{name}.norm"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_keeps_background_and_saturates_on_axis() {
        let base = Image::from_vec(3, 1, vec![0.0, 2.0, 4.0]);
        let cannula = Image::from_vec(3, 1, vec![0.0, 0.0, 10.0]);
        let out = composite(&base, &cannula, 5.0);
        assert_eq!(out.data[0], 0.0);
        assert_eq!(out.data[1], 0.5);
        assert!((out.data[2] - (1.0 * 0.2 + 0.8)).abs() < 1e-15);
    }
}
