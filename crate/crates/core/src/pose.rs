//! Hand and object pose representations, the linear PCA prior and the
//! bounding-box corner parametrization with Procrustes recovery.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};

/// Joint locations in camera space, mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandPose {
    pub joints: Vec<Vector3<f64>>,
}

impl HandPose {
    pub fn new(joints: Vec<Vector3<f64>>) -> Self {
        HandPose { joints }
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.joints.iter().flat_map(|j| [j.x, j.y, j.z]).collect()
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if !v.len().is_multiple_of(3) {
            return invalid(format!("flat pose of length {} is not a multiple of 3", v.len()));
        }
        Ok(HandPose {
            joints: v.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().all(|j| j.iter().all(|v| v.is_finite()))
    }
}

/// Rigid transform `x -> R x + t` with `R` a proper rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl ObjectPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(err <= 1e-9) {
            return invalid(format!("rotation not orthonormal (deviation {err:e})"));
        }
        if rotation.determinant() < 0.0 {
            return invalid("rotation has determinant -1");
        }
        Ok(ObjectPose { rotation, translation })
    }

    pub fn identity() -> Self {
        ObjectPose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_rows(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_rows(m: &[f64]) -> Result<Self> {
        if m.len() != 12 {
            return invalid("object pose needs 12 values");
        }
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let t = Vector3::new(m[3], m[7], m[11]);
        // re-orthonormalize what a text round trip may have perturbed
        let svd = r.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        ObjectPose::new(u * vt, t)
    }

    /// Angle of `R_a^T R_b`, radians.
    pub fn rotation_angle_to(&self, other: &ObjectPose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        // via the skew part for accuracy near zero
        let s = Vector3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]).norm() / 2.0;
        let c = (rel.trace() - 1.0) / 2.0;
        s.atan2(c)
    }
}

/// The 8 transformed corners of the canonical box, ordered
/// lexicographically over `(+-x, +-y, +-z)` with minus first.
pub type CornerSet = [Vector3<f64>; 8];

pub fn canonical_corners(half: &[f64; 3]) -> CornerSet {
    let mut out = [Vector3::zeros(); 8];
    for (i, c) in out.iter_mut().enumerate() {
        let s = |bit: usize| if i >> bit & 1 == 1 { 1.0 } else { -1.0 };
        *c = Vector3::new(s(2) * half[0], s(1) * half[1], s(0) * half[2]);
    }
    out
}

pub fn corners_from_pose(pose: &ObjectPose, half: &[f64; 3]) -> CornerSet {
    canonical_corners(half).map(|c| pose.apply(&c))
}

pub fn corners_flat(c: &CornerSet) -> Vec<f64> {
    c.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

pub fn corners_from_flat(v: &[f64]) -> Result<CornerSet> {
    if v.len() != 24 {
        return invalid(format!("corner vector of length {}", v.len()));
    }
    let mut out = [Vector3::zeros(); 8];
    for (i, c) in out.iter_mut().enumerate() {
        *c = Vector3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
    }
    Ok(out)
}

/// Least-squares rigid fit of the canonical corners onto `corners` (Kabsch)
/// with the determinant sign correction on the weakest singular direction.
pub fn pose_from_corners(corners: &CornerSet, half: &[f64; 3]) -> Result<ObjectPose> {
    if corners.iter().any(|c| !c.iter().all(|v| v.is_finite())) {
        return invalid("non-finite corner");
    }
    let canon = canonical_corners(half);
    let pc: Vector3<f64> = canon.iter().sum::<Vector3<f64>>() / 8.0;
    let qc: Vector3<f64> = corners.iter().sum::<Vector3<f64>>() / 8.0;

    let centered = DMatrix::from_fn(8, 3, |i, j| corners[i][j] - qc[j]);
    let sv = centered.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if smax == 0.0 || smin <= 1e-9 * smax {
        return Err(CoreError::Degenerate("corner set spans fewer than 3 dimensions".into()));
    }

    let mut h = Matrix3::zeros();
    for (p, q) in canon.iter().zip(corners) {
        h += (p - pc) * (q - qc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let v = svd.v_t.unwrap().transpose();
    let d = (v * u.transpose()).determinant().signum();
    // the sign flip goes on the column of the smallest singular value
    let weakest = svd.singular_values.imin();
    let mut diag = Vector3::new(1.0, 1.0, 1.0);
    diag[weakest] = d;
    let r = v * Matrix3::from_diagonal(&diag) * u.transpose();
    let t = qc - r * pc;
    Ok(ObjectPose { rotation: r, translation: t })
}

/// Rigidify an arbitrary corner estimate.
pub fn project_corners(corners: &CornerSet, half: &[f64; 3]) -> Result<CornerSet> {
    Ok(corners_from_pose(&pose_from_corners(corners, half)?, half))
}

/// Linear pose prior: `decode(a) = mean + B a` with orthonormal `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosePrior {
    pub mean: DVector<f64>,
    pub basis: DMatrix<f64>,
}

impl PosePrior {
    /// Rounds every entry to single precision, the width it is stored at
    /// next to a single-precision predictor.
    pub fn to_f32_precision(mut self) -> Self {
        self.mean.iter_mut().for_each(|v| *v = *v as f32 as f64);
        self.basis.iter_mut().for_each(|v| *v = *v as f32 as f64);
        self
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.basis.ncols()
    }

    pub fn encode(&self, pose: &[f64]) -> Vec<f64> {
        let d = DVector::from_column_slice(pose) - &self.mean;
        (self.basis.transpose() * d).as_slice().to_vec()
    }

    pub fn decode(&self, coeffs: &[f64]) -> Vec<f64> {
        (&self.mean + &self.basis * DVector::from_column_slice(coeffs)).as_slice().to_vec()
    }

    /// `B a` without the mean; maps coefficient deltas to pose deltas.
    pub fn decode_delta(&self, coeffs: &[f64]) -> Vec<f64> {
        (&self.basis * DVector::from_column_slice(coeffs)).as_slice().to_vec()
    }

    /// Mean squared reconstruction error over `poses`.
    pub fn reconstruction_error(&self, poses: &[Vec<f64>]) -> f64 {
        let total: f64 = poses
            .iter()
            .map(|p| {
                let r = self.decode(&self.encode(p));
                p.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .sum();
        total / poses.len() as f64
    }
}

/// PCA over flattened poses via the SVD of the centred data matrix.
pub fn fit_prior(poses: &[Vec<f64>], k: usize) -> Result<PosePrior> {
    let n = poses.len();
    if n == 0 {
        return invalid("no poses");
    }
    let d = poses[0].len();
    if poses.iter().any(|p| p.len() != d) {
        return invalid("poses of differing dimension");
    }
    if k > d {
        return invalid(format!("k = {k} exceeds pose dimension {d}"));
    }
    let mut mean = DVector::zeros(d);
    for p in poses {
        mean += DVector::from_column_slice(p);
    }
    mean /= n as f64;
    let x = DMatrix::from_fn(n, d, |i, j| poses[i][j] - mean[j]);
    let svd = x.svd(false, true);
    let vt = svd.v_t.unwrap();
    let sv = svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|a, b| sv[*b].total_cmp(&sv[*a]));
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let rank = sv.iter().filter(|s| **s > 1e-10 * smax.max(1e-300) && **s > 1e-12).count();
    if rank < k {
        return Err(CoreError::RankDeficient {
            attained: rank,
            requested: k,
        });
    }
    let basis = DMatrix::from_fn(d, k, |r, c| vt[(order[c], r)]);
    Ok(PosePrior { mean, basis })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order_is_lexicographic() {
        let c = canonical_corners(&[1.0, 2.0, 3.0]);
        assert_eq!(c[0], Vector3::new(-1.0, -2.0, -3.0));
        assert_eq!(c[1], Vector3::new(-1.0, -2.0, 3.0));
        assert_eq!(c[2], Vector3::new(-1.0, 2.0, -3.0));
        assert_eq!(c[4], Vector3::new(1.0, -2.0, -3.0));
        assert_eq!(c[7], Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn identity_and_translation_corners() {
        let half = [10.0, 20.0, 30.0];
        assert_eq!(corners_from_pose(&ObjectPose::identity(), &half), canonical_corners(&half));
        let t = Vector3::new(5.0, -3.0, 400.0);
        let p = ObjectPose::new(Matrix3::identity(), t).unwrap();
        for (a, b) in corners_from_pose(&p, &half).iter().zip(canonical_corners(&half)) {
            assert_eq!(*a, b + t);
        }
    }

    #[test]
    fn reflected_corners_give_proper_rotation() {
        let half = [10.0, 20.0, 30.0];
        let mut c = canonical_corners(&half);
        for p in c.iter_mut() {
            p.x = -p.x;
        }
        let pose = pose_from_corners(&c, &half).unwrap();
        assert!((pose.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_corners_rejected() {
        let half = [10.0, 20.0, 30.0];
        let mut c = canonical_corners(&half);
        for p in c.iter_mut() {
            p.z = 0.0;
        }
        assert!(matches!(pose_from_corners(&c, &half), Err(CoreError::Degenerate(_))));
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        assert!(ObjectPose::new(Matrix3::identity() * 1.01, Vector3::zeros()).is_err());
        assert!(ObjectPose::new(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)), Vector3::zeros()).is_err());
    }

    #[test]
    fn constant_poses_prior() {
        let p = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let poses = vec![p.clone(); 5];
        let prior = fit_prior(&poses, 0).unwrap();
        assert_eq!(prior.mean.as_slice(), p.as_slice());
        assert_eq!(prior.reconstruction_error(&poses), 0.0);
        assert!(matches!(
            fit_prior(&poses, 1),
            Err(CoreError::RankDeficient { attained: 0, requested: 1 })
        ));
    }

    #[test]
    fn line_poses_k1() {
        let dir = [1.0, -2.0, 0.5, 0.0, 3.0, 1.0];
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let poses: Vec<Vec<f64>> = (0..7).map(|i| dir.iter().map(|d| d * (i as f64 - 2.0) + 1.0).collect()).collect();
        let prior = fit_prior(&poses, 1).unwrap();
        let dot: f64 = prior.basis.column(0).iter().zip(&dir).map(|(a, b)| a * b / norm).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-12);
        assert!(prior.reconstruction_error(&poses) < 1e-20);
    }

    #[test]
    fn mean_encodes_to_zero() {
        let poses: Vec<Vec<f64>> = (0..10).map(|i| (0..6).map(|j| ((i * 7 + j * 3) % 11) as f64).collect()).collect();
        let prior = fit_prior(&poses, 3).unwrap();
        let z = prior.encode(prior.mean.as_slice());
        assert!(z.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(prior.decode(&[0.0; 3]), prior.mean.as_slice().to_vec());
    }
}
