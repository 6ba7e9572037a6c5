//! Projector checks against explicitly materialized system matrices.

mod common;

use lsirt_core::geometry::{make_cone_geometry, make_parallel_geometry};
use lsirt_core::volume::dot;
use lsirt_core::{Geometry, GridSpec, Projector};
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn parallel_matches_dense_matrix() {
    let grid = GridSpec::new_2d(16, 16, 1.0).unwrap();
    let geo = make_parallel_geometry(8, 23, 1.0).unwrap();
    let dense = dense_parallel(&grid, &geo);
    let op = Projector::new(grid, geo.into()).unwrap();
    let m = dense_mismatch(&op, &dense);
    assert!(m.forward <= 1e-8 && m.adjoint <= 1e-8, "{m:?}");
    assert!(m.rows <= 1e-10 && m.cols <= 1e-10, "{m:?}");
}

#[test]
fn parallel_matches_dense_matrix_odd_pitch() {
    let grid = GridSpec::new_2d(9, 7, 0.8).unwrap();
    let geo = make_parallel_geometry(7, 12, 0.6).unwrap();
    let dense = dense_parallel(&grid, &geo);
    let op = Projector::new(grid, geo.into()).unwrap();
    let m = dense_mismatch(&op, &dense);
    assert!(m.forward <= 1e-8 && m.adjoint <= 1e-8, "{m:?}");
    assert!(m.rows <= 1e-10 && m.cols <= 1e-10, "{m:?}");
}

#[test]
fn cone_matches_dense_matrix() {
    let grid = GridSpec::new_3d(8, 8, 8, 1.0).unwrap();
    let geo = make_cone_geometry(4, 10, 10, 1.6, 20.0, 30.0).unwrap();
    let dense = dense_cone(&grid, &geo);
    let op = Projector::new(grid, geo.into()).unwrap();
    let m = dense_mismatch(&op, &dense);
    assert!(m.forward <= 1e-8 && m.adjoint <= 1e-8, "{m:?}");
    assert!(m.rows <= 1e-10 && m.cols <= 1e-10, "{m:?}");
}

#[test]
fn adjoint_identity_parallel_16() {
    let grid = GridSpec::new_2d(16, 16, 1.0).unwrap();
    let op = Projector::new(grid, make_parallel_geometry(8, 23, 1.0).unwrap().into()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        assert!(adjoint_gap(&op, &mut rng) <= 1e-6);
    }
}

#[test]
fn uniform_disk_rows_agree_across_angles() {
    let grid = GridSpec::new_2d(16, 16, 1.0).unwrap();
    let geo = make_parallel_geometry(8, 23, 1.0).unwrap();
    let disk: Vec<f64> = (0..256)
        .map(|k| {
            let (x, y) = (grid.center(0, k % 16), grid.center(1, k / 16));
            if x * x + y * y <= 36.0 { 1.0 } else { 0.0 }
        })
        .collect();
    let dense = dense_parallel(&grid, &geo);
    let op = Projector::new(grid, geo.into()).unwrap();
    let sino = op.forward(&disk);
    for (i, row) in dense.iter().enumerate() {
        assert!((dot(row, &disk) - sino[i]).abs() < 1e-10);
    }
    // The pixelized disk has the symmetries of the square, so views 90°
    // apart coincide.
    let view = |k: usize| &sino[k * 23..(k + 1) * 23];
    for k in 0..8 {
        let other = view((k + 2) % 8);
        for (a, b) in view(k).iter().zip(other) {
            assert!((a - b).abs() < 1e-10);
        }
    }
    // All views agree with each other to within the pixelization error.
    let total: f64 = view(0).iter().sum();
    for k in 1..8 {
        let sum_k: f64 = view(k).iter().sum();
        assert!((sum_k - total).abs() / total < 0.05, "view {k} mass {sum_k} vs {total}");
        for (a, b) in view(k).iter().zip(view(0)) {
            assert!((a - b).abs() < 0.35 * 12.0, "{a} vs {b}");
        }
    }
}

#[test]
fn parallel_rotation_equivariance() {
    // Rotating the image by +90° equals shifting the sinogram by a quarter
    // turn of views.
    let n = 12;
    let grid = GridSpec::new_2d(n, n, 1.0).unwrap();
    let geo = make_parallel_geometry(8, 17, 1.0).unwrap();
    let op = Projector::new(grid.clone(), geo.into()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = random_vec(&mut rng, n * n);
    // (x, y) -> (-y, x): new[i', j'] = old[j', n-1-i'].
    let mut rot = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            rot[j * n + i] = img[(n - 1 - i) * n + j];
        }
    }
    let s = op.forward(&img);
    let sr = op.forward(&rot);
    for k in 0..8 {
        let shifted = (k + 8 - 2) % 8;
        for b in 0..17 {
            let a = sr[k * 17 + b];
            let e = s[shifted * 17 + b];
            assert!((a - e).abs() <= 1e-6 * (1.0 + e.abs()), "view {k} bin {b}: {a} vs {e}");
        }
    }
}

#[test]
fn bitwise_reproducible_across_thread_counts() {
    let grid = GridSpec::new_3d(10, 9, 8, 1.0).unwrap();
    let geo: Geometry = make_cone_geometry(5, 12, 14, 1.0, 100.0, 150.0).unwrap().into();
    let op = Projector::new(grid, geo).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_vec(&mut rng, op.volume_len());
    let s = random_vec(&mut rng, op.sinogram_len());
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| (op.forward(&x), op.adjoint(&s)))
    };
    let (f1, b1) = run(1);
    let (f3, b3) = run(3);
    assert_eq!(f1, f3);
    assert_eq!(b1, b3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let grid = GridSpec::new_2d(10, 10, 1.0).unwrap();
        let op = Projector::new(grid, make_parallel_geometry(6, 15, 1.0).unwrap().into()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x1 = random_vec(&mut rng, 100);
        let x2 = random_vec(&mut rng, 100);
        let comb: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = op.forward(&comb);
        let (a1, a2) = (op.forward(&x1), op.forward(&x2));
        let scale = lhs.iter().map(|v| v.abs()).fold(1.0, f64::max);
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - (alpha * a1[i] + beta * a2[i])).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn cone_adjoint_identity(seed in any::<u64>()) {
        let grid = GridSpec::new_3d(6, 7, 5, 1.0).unwrap();
        let geo = make_cone_geometry(3, 9, 8, 1.2, 40.0, 60.0).unwrap();
        let op = Projector::new(grid, geo.into()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert!(adjoint_gap(&op, &mut rng) <= 1e-6);
    }
}
