//! Rigid alignment and triangulation round trips.

use proptest::prelude::*;
use vertplan_core::geometry::{rigid_align, so3_exp, triangulate_point, Vec3};
use vertplan_core::scenario::Rig;

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rigid_align_recovers_a_constructed_transform(
        axis in vec3(1.0).prop_filter("nonzero", |v| v.norm() > 1e-3),
        angle in 0.0..3.1f64,
        t in vec3(200.0),
        src in proptest::collection::vec(vec3(60.0), 4..30),
    ) {
        let r0 = so3_exp(&(axis.normalize() * angle));
        let dst: Vec<Vec3> = src.iter().map(|p| r0 * p + t).collect();
        let a = rigid_align(&src, &dst).unwrap();
        prop_assert!((a.transform.rotation_matrix() - r0).norm() < 1e-9);
        prop_assert!((a.transform.translation - t).norm() < 1e-9 * (1.0 + t.norm()));
    }

    #[test]
    fn noiseless_triangulation_round_trip(p in vec3(40.0), sep in 30.0..150.0f64) {
        let cams = Rig::clinical().pair(&Vec3::zeros(), sep).unwrap();
        let (a, b) = (cams[0].project(&p).unwrap(), cams[1].project(&p).unwrap());
        let tri = triangulate_point(&a, &cams[0], &b, &cams[1]).unwrap();
        prop_assert!((tri.point - p).norm() < 1e-9, "{}", (tri.point - p).norm());
    }
}
