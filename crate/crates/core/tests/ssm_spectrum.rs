//! Shape-model spectrum against a dense covariance eigendecomposition.

use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use vertplan_core::eval::{generate_phantoms_with, PhantomConfig, PhantomFamily};
use vertplan_core::geometry::{RigidTransform, Vec3};
use vertplan_core::ssm::{build_model, explained_variance, instantiate, PoseShapeParams};

fn coarse() -> PhantomConfig {
    PhantomConfig {
        spacing: 9.0,
        interior: false,
    }
}

fn family(seed: u64, count: usize, dims: usize) -> PhantomFamily {
    generate_phantoms_with(seed, count, dims, &coarse())
}

/// Descending eigenvalues of the `3N x 3N` sample covariance.
fn dense_spectrum(shapes: &[Vec<Vec3>]) -> Vec<f64> {
    let m = shapes.len();
    let d = 3 * shapes[0].len();
    let rows: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| s.iter().flat_map(|p| [p.x, p.y, p.z]).collect())
        .collect();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m as f64).collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in &rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    cov /= (m - 1) as f64;
    let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

#[test]
fn eigenvalues_match_dense_covariance() {
    let fam = family(3, 50, 8);
    let (model, report) = build_model(&fam.samples, 15, fam.annotations().clone(), fam.faces().to_vec(), "L1").unwrap();
    let dense = dense_spectrum(&report.aligned);
    for (k, (a, b)) in model.eigenvalues.iter().zip(&dense).enumerate() {
        let rel = (a - b).abs() / b;
        assert!(rel < 1e-8, "mode {k}: model {a:e} dense {b:e} rel {rel:e}");
    }
    let trace: f64 = dense.iter().sum();
    assert!((model.total_variance - trace).abs() < 1e-9 * trace);
}

#[test]
fn full_rank_explains_everything_monotonically() {
    let fam = family(5, 50, 8);
    let (model, report) = build_model(&fam.samples, 49, fam.annotations().clone(), fam.faces().to_vec(), "L1").unwrap();
    let ev: Vec<f64> = (1..=49).map(|k| explained_variance(&model, k).unwrap()).collect();
    assert!(ev.windows(2).all(|w| w[1] >= w[0]));
    assert!((ev[48] - 1.0).abs() < 1e-12, "{}", ev[48]);
    for (a, b) in ev.iter().zip(&report.explained) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(explained_variance(&model, 0).is_err());
}

#[test]
fn two_latent_factors_need_two_modes() {
    let fam = generate_phantoms_with(11, 50, 2, &PhantomConfig::default());
    let (model, _) = build_model(&fam.samples, 15, fam.annotations().clone(), fam.faces().to_vec(), "L1").unwrap();
    let e2 = explained_variance(&model, 2).unwrap();
    assert!(e2 >= 0.99, "top-2 explained {e2}");
}

#[test]
fn instantiate_then_inverse_pose_gives_shape_only_instance() {
    let fam = family(2, 20, 4);
    let (model, _) = build_model(&fam.samples, 6, fam.annotations().clone(), fam.faces().to_vec(), "L1").unwrap();
    let coeffs: Vec<f64> = model.eigenvalues.iter().enumerate().map(|(k, l)| (k as f64 - 2.5) * 0.3 * l.sqrt()).collect();
    let pose = RigidTransform::new(Vec3::new(0.3, -0.7, 1.1), Vec3::new(12.0, -4.0, 33.0));
    let posed = instantiate(&model, &PoseShapeParams::new(pose, coeffs.clone())).unwrap();
    let plain = instantiate(&model, &PoseShapeParams::new(RigidTransform::identity(), coeffs)).unwrap();
    let inv = pose.inverse();
    for (p, q) in posed.iter().zip(&plain) {
        assert!((inv.apply(p) - q).norm() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn explained_variance_is_monotone_for_any_family(seed in 0u64..1000, count in 10usize..30, dims in 1usize..6) {
        let fam = family(seed, count, dims);
        let modes = (count - 1).min(12);
        let (model, _) = build_model(&fam.samples, modes, fam.annotations().clone(), fam.faces().to_vec(), "T1").unwrap();
        let mut last = 0.0;
        for k in 1..=modes {
            let e = explained_variance(&model, k).unwrap();
            prop_assert!(e + 1e-15 >= last && e <= 1.0);
            last = e;
        }
        prop_assert!(model.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }
}
