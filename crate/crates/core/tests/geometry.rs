//! STN, ISTN and crop-transform oracles.

use fbpose_core::depth::DepthImage;
use fbpose_core::geometry::{bilinear, compute_crop_transform, istn_paste_values, stn_sample_with, CameraIntrinsics, CropTransform, CubeSpec};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

/// Full-image sum `sum_hw f[h,w] max(0, 1-|x-w|) max(0, 1-|y-h|)`.
fn sum_oracle(f: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let mut acc = 0.0;
    for r in 0..h {
        for c in 0..w {
            acc += f[r * w + c] * (1.0 - (x - c as f64).abs()).max(0.0) * (1.0 - (y - r as f64).abs()).max(0.0);
        }
    }
    acc
}

fn pixel_grid(size: usize, origin: (f64, f64), spacing: f64) -> CropTransform {
    let half = spacing * (size - 1) as f64 / 2.0;
    #[rustfmt::skip]
    let a = Matrix3::new(
        half, 0.0, origin.0 + half,
        0.0, half, origin.1 + half,
        0.0, 0.0, 1.0,
    );
    CropTransform {
        a,
        center: Vector3::new(0.0, 0.0, 500.0),
        cube: CubeSpec::uniform(100.0),
        size,
    }
}

proptest! {
    #[test]
    fn bilinear_matches_full_sum(seed in 0u64..1000, x in -1.5f64..9.5, y in -1.5f64..7.5) {
        let (w, h) = (9, 7);
        let f: Vec<f64> = (0..w * h).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 10.0).collect();
        let got = bilinear(&|r, c| f[r * w + c], w, h, x, y, 0.0);
        prop_assert!((got - sum_oracle(&f, w, h, x, y)).abs() <= 1e-12);
    }

    #[test]
    fn crop_matrix_closed_form(tx in -200.0f64..200.0, ty in -200.0f64..200.0, tz in 300.0f64..1200.0, c in 50.0f64..200.0) {
        let cam = CameraIntrinsics::desk();
        let ct = compute_crop_transform(&Vector3::new(tx, ty, tz), &CubeSpec::uniform(c), &cam, 64).unwrap();
        let expect = [
            (0, 0, cam.fx * c / tz),
            (0, 2, cam.fx * tx / tz + cam.cx),
            (1, 1, cam.fy * c / tz),
            (1, 2, cam.fy * ty / tz + cam.cy),
            (0, 1, 0.0),
            (1, 0, 0.0),
            (2, 2, 1.0),
        ];
        for (r, k, v) in expect {
            prop_assert!((ct.a[(r, k)] - v).abs() <= 1e-9 * v.abs().max(1.0));
        }
    }
}

#[test]
fn stn_on_unit_grid_reads_pixels() {
    let (w, h) = (20, 16);
    let img: Vec<f64> = (0..w * h).map(|i| (i * 7 % 13) as f64).collect();
    let ct = pixel_grid(8, (3.0, 5.0), 1.0);
    let patch = stn_sample_with(|r, c| img[r * w + c], w, h, &ct, -1.0);
    for i in 0..8 {
        for j in 0..8 {
            assert_eq!(patch[i * 8 + j], img[(5 + i) * w + 3 + j]);
        }
    }
}

#[test]
fn stn_then_istn_round_trips_interior() {
    let (w, h) = (40, 30);
    // linear ramps survive any integer spacing exactly
    let ramp: Vec<f64> = (0..w * h).map(|i| 3.0 * (i % w) as f64 - 2.0 * (i / w) as f64 + 100.0).collect();
    for spacing in [1.0, 2.0, 3.0] {
        let ct = pixel_grid(9, (4.0, 2.0), spacing);
        let patch = stn_sample_with(|r, c| ramp[r * w + c], w, h, &ct, 0.0);
        let mut canvas = vec![f64::NAN; w * h];
        istn_paste_values(&patch, &ct, &mut canvas, w, h).unwrap();
        let span = (spacing * 8.0) as usize;
        for v in 2..=2 + span {
            for u in 4..=4 + span {
                assert!((canvas[v * w + u] - ramp[v * w + u]).abs() <= 1e-6, "spacing {spacing} at ({u}, {v})");
            }
        }
        assert!(canvas[0].is_nan());
    }
}

#[test]
fn crop_of_rear_plane_is_rear() {
    let cam = CameraIntrinsics::desk();
    let d = DepthImage::from_data(cam.width, cam.height, vec![2000.0; cam.width * cam.height]).unwrap();
    let ct = compute_crop_transform(&Vector3::new(0.0, 0.0, 500.0), &CubeSpec::uniform(125.0), &cam, 32).unwrap();
    let (patch, outside) = fbpose_core::geometry::crop_with(&d, &ct);
    assert!(!outside);
    let bad: Vec<_> = patch.iter().enumerate().filter(|(_, v)| (**v - 1.0).abs() > 1e-12).take(5).collect();
    assert!(bad.is_empty(), "{bad:?}");
}
