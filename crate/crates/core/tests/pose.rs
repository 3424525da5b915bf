//! Procrustes and PCA prior oracles.

use fbpose_core::pose::{corners_from_pose, fit_prior, pose_from_corners, ObjectPose};
use nalgebra::{DMatrix, Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HALF: [f64; 3] = [28.0, 20.0, 40.0];

proptest! {
    #[test]
    fn procrustes_recovers_rigid_transform(ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0, angle in 0.0f64..3.1, t in prop::array::uniform3(-500.0f64..500.0)) {
        let axis = Vector3::new(ax, ay, az + 1e-3);
        let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        let pose = ObjectPose::new(*r.matrix(), Vector3::from(t)).unwrap();
        let back = pose_from_corners(&corners_from_pose(&pose, &HALF), &HALF).unwrap();
        prop_assert!(back.rotation_angle_to(&pose) < 1e-9);
        prop_assert!((back.translation - pose.translation).norm() < 1e-9);
    }
}

fn random_poses(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // anisotropic so the spectrum has distinct eigenvalues
    (0..n).map(|_| (0..d).map(|j| rng.random_range(-1.0..1.0) / (1.0 + j as f64)).collect()).collect()
}

#[test]
fn encode_decode_round_trip_in_subspace() {
    let poses = random_poses(200, 42, 3);
    let prior = fit_prior(&poses, 30).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let a: Vec<f64> = (0..30).map(|_| rng.random_range(-2.0..2.0)).collect();
        let back = prior.encode(&prior.decode(&a));
        assert!(a.iter().zip(&back).all(|(x, y)| (x - y).abs() < 1e-9));
    }
}

#[test]
fn reconstruction_error_is_discarded_eigenvalue_sum() {
    let (n, d) = (300, 42);
    let poses = random_poses(n, d, 5);
    let mean: Vec<f64> = (0..d).map(|j| poses.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| poses[i][j] - mean[j]);
    let cov = x.transpose() * &x / n as f64;
    let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    for k in [1, 10, 30, 42] {
        let prior = fit_prior(&poses, k).unwrap();
        let oracle: f64 = eig[k..].iter().sum();
        assert!((prior.reconstruction_error(&poses) - oracle).abs() < 1e-8, "k = {k}");
    }
}

#[test]
fn procrustes_thousand_random_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let r = Rotation3::from_scaled_axis(Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)) / 1.8);
        let t = Vector3::new(rng.random_range(-300.0..300.0), rng.random_range(-300.0..300.0), rng.random_range(200.0..900.0));
        let pose = ObjectPose::new(*r.matrix(), t).unwrap();
        let back = pose_from_corners(&corners_from_pose(&pose, &HALF), &HALF).unwrap();
        assert!(back.rotation_angle_to(&pose) < 1e-9);
    }
}
