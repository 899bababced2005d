//! Trajectory planning: index oracles, analytic cylinder clearance and
//! GeoPlan noise sensitivity at the clinical rig.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vertplan_core::eval::{generate_phantoms_with, PhantomConfig};
use vertplan_core::geometry::{RigidTransform, Vec3};
use vertplan_core::planning::{
    clearance, geoplan_triangulate, plan_from_fit, PlanError, Trajectory, DEFAULT_CLEARANCE_THRESHOLD,
    DEFAULT_DIAMETER,
};
use vertplan_core::scenario::{project_segment, random_coefficients, random_unit_vector, Rig};
use vertplan_core::ssm::{build_model, instantiate, PoseShapeParams, ShapeModel, Side};

fn model() -> ShapeModel {
    let cfg = PhantomConfig {
        spacing: 9.0,
        interior: false,
    };
    let fam = generate_phantoms_with(17, 30, 5, &cfg);
    build_model(&fam.samples, 10, fam.annotations().clone(), fam.faces().to_vec(), "L1").unwrap().0
}

#[test]
fn plans_follow_annotated_vertices() {
    let model = model();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let identity = plan_from_fit(&model, &PoseShapeParams::identity(model.modes()), DEFAULT_DIAMETER).unwrap();
    let t0 = Vec3::new(5.0, -3.0, 40.0);
    let shifted = plan_from_fit(
        &model,
        &PoseShapeParams::new(RigidTransform::from_translation(t0), vec![0.0; model.modes()]),
        DEFAULT_DIAMETER,
    )
    .unwrap();
    for (a, b) in identity.iter().zip(&shifted) {
        let idx = model.annotations.trajectory(a.side);
        assert_eq!(a.entry, model.mean_points[idx.entry]);
        assert_eq!(a.target, model.mean_points[idx.exit]);
        assert!((b.entry - a.entry - t0).norm() < 1e-12 && (b.target - a.target - t0).norm() < 1e-12);
        assert_eq!(a.diameter, 5.0);
    }
    for _ in 0..20 {
        let pose = RigidTransform::new(random_unit_vector(&mut rng) * rng.random_range(0.0..3.0), random_unit_vector(&mut rng) * 50.0);
        let params = PoseShapeParams::new(pose, random_coefficients(&model, &mut rng));
        let pts = instantiate(&model, &params).unwrap();
        for t in plan_from_fit(&model, &params, DEFAULT_DIAMETER).unwrap() {
            let idx = model.annotations.trajectory(t.side);
            assert_eq!(t.entry, pts[idx.entry]);
            assert_eq!(t.target, pts[idx.exit]);
        }
    }
}

/// Rings of points on the cylinder of radius `r` around `a`-`b`.
fn cylinder_surface(a: Vec3, b: Vec3, r: f64) -> Vec<Vec3> {
    let axis = (b - a).normalize();
    let u = axis.cross(&Vec3::new(0.3, 0.5, 0.8)).normalize();
    let v = axis.cross(&u);
    let mut pts = Vec::new();
    for i in 0..=20 {
        let c = a + (b - a) * (i as f64 / 20.0);
        for j in 0..36 {
            let phi = std::f64::consts::TAU * j as f64 / 36.0;
            pts.push(c + (u * phi.cos() + v * phi.sin()) * r);
        }
    }
    pts
}

#[test]
fn analytic_cylinder_clearance() {
    let (a, b) = (Vec3::new(-10.0, 4.0, 2.0), Vec3::new(12.0, 30.0, -6.0));
    let axis = Trajectory::new(Side::Left, a, b, DEFAULT_DIAMETER).unwrap();
    for (r, breach) in [(2.4, true), (2.49, true), (2.51, false), (2.6, false), (4.0, false), (1.0, true)] {
        let c = clearance(&axis, &cylinder_surface(a, b, r), DEFAULT_CLEARANCE_THRESHOLD).unwrap();
        assert!((c.min_axis_distance - r).abs() < 1e-9, "r {r}: {}", c.min_axis_distance);
        assert_eq!(c.breach, breach, "r {r}");
    }
    let off = Trajectory::new(Side::Left, a + Vec3::new(0.0, 0.0, 1.0), b + Vec3::new(0.0, 0.0, 1.0), 5.0).unwrap();
    let c = clearance(&off, &cylinder_surface(a, b, 3.0), 2.5).unwrap();
    assert!(c.min_axis_distance < 3.0 && c.breach == (c.min_axis_distance < 2.5));
}

/// Mean per-endpoint error over 1000 random segments with 1 px endpoint
/// noise. Both cameras sit on a horizontal circle, so horizontal segments lie
/// near an epipolar plane; segments within 10 degrees of it are excluded, as
/// are segments within 30 degrees of a viewing axis.
#[test]
fn geoplan_noise_at_clinical_geometry() {
    let rig = Rig::clinical();
    let cams = rig.pair(&Vec3::zeros(), 90.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut errors = Vec::with_capacity(2000);
    while errors.len() < 2000 {
        let dir = random_unit_vector(&mut rng);
        if cams.iter().any(|c| dir.dot(&c.view_direction()).abs() > 30f64.to_radians().cos())
            || dir.z.abs() < 10f64.to_radians().sin()
        {
            continue;
        }
        let mid = random_unit_vector(&mut rng) * rng.random_range(0.0..20.0);
        let len = rng.random_range(30.0..45.0);
        let (e, t) = (mid - dir * len / 2.0, mid + dir * len / 2.0);
        let sa = project_segment(&e, &t, &cams[0], 1.0, &mut rng).unwrap();
        let sb = project_segment(&e, &t, &cams[1], 1.0, &mut rng).unwrap();
        let traj = geoplan_triangulate(&sa, &cams[0], &sb, &cams[1], Side::Right, DEFAULT_DIAMETER).unwrap();
        errors.push((traj.entry - e).norm());
        errors.push((traj.target - t).norm());
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    errors.sort_by(f64::total_cmp);
    eprintln!("geoplan endpoint error: mean {mean:.3} mm, p95 {:.3} mm", errors[errors.len() * 95 / 100]);
    assert!(mean < 2.0, "mean endpoint error {mean} mm");
}

#[test]
fn horizontal_segment_between_horizontal_cameras_is_degenerate() {
    let cams = Rig::clinical().pair(&Vec3::zeros(), 90.0).unwrap();
    let (e, t) = (Vec3::new(-15.0, 10.0, 0.0), Vec3::new(12.0, -8.0, 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sa = project_segment(&e, &t, &cams[0], 0.0, &mut rng).unwrap();
    let sb = project_segment(&e, &t, &cams[1], 0.0, &mut rng).unwrap();
    assert!(matches!(
        geoplan_triangulate(&sa, &cams[0], &sb, &cams[1], Side::Left, 5.0),
        Err(PlanError::Degenerate(_))
    ));
}
