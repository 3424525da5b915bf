//! Articulated capsule hand: a 14-joint kinematic tree with palm anchors,
//! forward kinematics and the grasp-like articulation sampler.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::geometry::CameraIntrinsics;
use crate::pose::HandPose;

pub const MCP: usize = 0;
pub const FINGERTIPS: [usize; 5] = [5, 7, 9, 11, 13];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Endpoint {
    Joint(usize),
    /// Point fixed in the palm frame.
    Anchor(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapsuleSpec {
    pub a: Endpoint,
    pub b: Endpoint,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandGeometry {
    /// Canonical joint positions, MCP at the origin, palm facing `-z`.
    pub rest: Vec<[f64; 3]>,
    pub parents: Vec<Option<usize>>,
    /// Palm-frame points. The palm frame is spanned by joints 0, 1, 2 and is
    /// the identity at rest.
    pub anchors: Vec<[f64; 3]>,
    pub capsules: Vec<CapsuleSpec>,
    pub fingertips: Vec<usize>,
}

struct Finger {
    anchor: Endpoint,
    mid: usize,
    tip: usize,
    lengths: [f64; 2],
    splay_deg: f64,
}

const FINGERS: [Finger; 4] = [
    Finger {
        anchor: Endpoint::Anchor(0),
        mid: 6,
        tip: 7,
        lengths: [42.0, 40.0],
        splay_deg: 8.0,
    },
    Finger {
        anchor: Endpoint::Joint(MCP),
        mid: 8,
        tip: 9,
        lengths: [46.0, 44.0],
        splay_deg: 0.0,
    },
    Finger {
        anchor: Endpoint::Anchor(1),
        mid: 10,
        tip: 11,
        lengths: [43.0, 40.0],
        splay_deg: -7.0,
    },
    Finger {
        anchor: Endpoint::Anchor(2),
        mid: 12,
        tip: 13,
        lengths: [33.0, 30.0],
        splay_deg: -15.0,
    },
];

const THUMB_BASE: [f64; 3] = [36.0, 50.0, -8.0];
const THUMB_LENGTHS: [f64; 2] = [35.0, 32.0];
const THUMB_DIR: [f64; 3] = [0.55, -0.8, -0.2];

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn deg(d: f64) -> f64 {
    d.to_radians()
}

impl Default for HandGeometry {
    fn default() -> Self {
        let anchors = vec![
            [22.0, 3.0, 0.0],   // 0 index base
            [-19.0, 4.0, 0.0],  // 1 ring base
            [-35.0, 12.0, 0.0], // 2 pinky base
            [0.0, 85.0, 0.0],   // 3 wrist centre
            [11.0, 2.0, 0.0],   // 4..7 palm fill
            [12.0, 85.0, 0.0],
            [-17.0, 6.0, 0.0],
            [-12.0, 85.0, 0.0],
            [20.0, 70.0, -2.0], // 8 thumb root
        ];
        let rest = FingerAngles::rest().joints(&anchors);
        let j = Endpoint::Joint;
        let a = Endpoint::Anchor;
        let cap = |a, b, radius| CapsuleSpec { a, b, radius };
        let mut capsules = vec![
            cap(a(0), j(2), 12.0),
            cap(a(2), j(1), 12.0),
            cap(j(0), a(3), 12.0),
            cap(a(4), a(5), 12.0),
            cap(a(6), a(7), 12.0),
            cap(a(0), a(2), 11.0),
            cap(j(1), j(2), 12.0),
            cap(a(8), j(3), 13.0),
            cap(j(3), j(4), 10.0),
            cap(j(4), j(5), 9.0),
        ];
        for (f, radii) in FINGERS.iter().zip([[9.0, 8.0], [9.5, 8.5], [9.0, 8.0], [8.0, 7.0]]) {
            capsules.push(cap(f.anchor, j(f.mid), radii[0]));
            capsules.push(cap(j(f.mid), j(f.tip), radii[1]));
        }
        HandGeometry {
            rest: rest.iter().map(|p| [p.x, p.y, p.z]).collect(),
            parents: vec![
                None,
                Some(0),
                Some(0),
                Some(0),
                Some(3),
                Some(4),
                Some(0),
                Some(6),
                Some(0),
                Some(8),
                Some(0),
                Some(10),
                Some(0),
                Some(12),
            ],
            anchors,
            capsules,
            fingertips: FINGERTIPS.to_vec(),
        }
    }
}

impl HandGeometry {
    pub fn num_joints(&self) -> usize {
        self.rest.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.num_joints();
        if j < 5 || self.parents.len() != j {
            return invalid("hand needs at least 5 joints with one parent entry each");
        }
        if self.parents[0].is_some() || self.parents.iter().skip(1).any(|p| !matches!(p, Some(q) if *q < j)) {
            return invalid("parent graph must be a tree rooted at joint 0");
        }
        if self.capsules.iter().any(|c| c.radius <= 0.0) {
            return invalid("capsule radii must be positive");
        }
        Ok(())
    }

    /// Palm rotation from joints 0, 1, 2: `y` toward the wrist midpoint,
    /// `x` along the wrist, `z = x * y`.
    pub fn palm_frame(&self, joints: &[Vector3<f64>]) -> Result<Matrix3<f64>> {
        let y = (joints[1] + joints[2]) / 2.0 - joints[0];
        let w = joints[2] - joints[1];
        if y.norm() < 1e-6 || w.norm() < 1e-6 {
            return Err(CoreError::Degenerate("palm joints coincide".into()));
        }
        let ey = y.normalize();
        let xw = w - ey * w.dot(&ey);
        if xw.norm() < 1e-6 {
            return Err(CoreError::Degenerate("wrist joints collinear with palm axis".into()));
        }
        let ex = xw.normalize();
        let ez = ex.cross(&ey);
        Ok(Matrix3::from_columns(&[ex, ey, ez]))
    }

    /// World-space capsules `(a, b, radius)` for a pose.
    pub fn capsules_for(&self, pose: &HandPose) -> Result<Vec<(Vector3<f64>, Vector3<f64>, f64)>> {
        if pose.num_joints() != self.num_joints() {
            return invalid(format!("pose has {} joints, geometry {}", pose.num_joints(), self.num_joints()));
        }
        if !pose.is_finite() {
            return invalid("non-finite joint");
        }
        let frame = self.palm_frame(&pose.joints)?;
        let origin = pose.joints[0];
        let point = |e: Endpoint| match e {
            Endpoint::Joint(i) => pose.joints[i],
            Endpoint::Anchor(k) => origin + frame * v3(self.anchors[k]),
        };
        let mut out = Vec::with_capacity(self.capsules.len());
        for c in &self.capsules {
            if let (Endpoint::Joint(i), Endpoint::Joint(k)) = (c.a, c.b) {
                if (pose.joints[i] - pose.joints[k]).norm() < 1e-6 {
                    return Err(CoreError::Degenerate(format!("joints {i} and {k} of one bone coincide")));
                }
            }
            out.push((point(c.a), point(c.b), c.radius));
        }
        Ok(out)
    }

    /// Axis lengths of all capsules.
    pub fn bone_lengths(&self, pose: &HandPose) -> Result<Vec<f64>> {
        Ok(self.capsules_for(pose)?.iter().map(|(a, b, _)| (b - a).norm()).collect())
    }
}

/// Articulation of one hand: per finger (index, middle, ring, pinky)
/// `[spread, proximal flexion, distal flexion]` and thumb
/// `[abduction, flexion]`, radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FingerAngles {
    pub fingers: [[f64; 3]; 4],
    pub thumb: [f64; 2],
}

impl FingerAngles {
    pub fn rest() -> Self {
        FingerAngles {
            fingers: [[0.0; 3]; 4],
            thumb: [0.0; 2],
        }
    }

    /// Joint positions in the palm frame.
    fn joints(&self, anchors: &[[f64; 3]]) -> Vec<Vector3<f64>> {
        let mut j = vec![Vector3::zeros(); 14];
        j[1] = Vector3::new(-24.0, 85.0, 0.0);
        j[2] = Vector3::new(24.0, 85.0, 0.0);
        let down = Vector3::new(0.0, -1.0, 0.0);
        for (f, a) in FINGERS.iter().zip(&self.fingers) {
            let base = match f.anchor {
                Endpoint::Joint(i) => j[i],
                Endpoint::Anchor(k) => v3(anchors[k]),
            };
            let spread = Rotation3::from_axis_angle(&Vector3::z_axis(), deg(f.splay_deg) + a[0]);
            let d1 = spread * Rotation3::from_axis_angle(&Vector3::x_axis(), a[1]) * down;
            let d2 = spread * Rotation3::from_axis_angle(&Vector3::x_axis(), a[1] + a[2]) * down;
            j[f.mid] = base + d1 * f.lengths[0];
            j[f.tip] = j[f.mid] + d2 * f.lengths[1];
        }
        j[3] = v3(THUMB_BASE);
        let dir = v3(THUMB_DIR).normalize();
        let abd = Rotation3::from_axis_angle(&Vector3::z_axis(), self.thumb[0]);
        let d1 = abd * Rotation3::from_axis_angle(&Vector3::x_axis(), self.thumb[1] * 0.5) * dir;
        let d2 = abd * Rotation3::from_axis_angle(&Vector3::x_axis(), self.thumb[1]) * dir;
        j[4] = j[3] + d1 * THUMB_LENGTHS[0];
        j[5] = j[4] + d2 * THUMB_LENGTHS[1];
        j
    }
}

/// Hand pose sampler settings. Angles in degrees, translation as pixel
/// offsets of the MCP from the principal point plus a depth range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandSampler {
    pub flex_mean: [f64; 2],
    pub flex_sigma: [f64; 2],
    pub spread_sigma: f64,
    pub thumb_sigma: [f64; 2],
    pub global_rotation: f64,
    pub pixel_offset: [f64; 2],
    pub depth_range: [f64; 2],
}

impl Default for HandSampler {
    fn default() -> Self {
        HandSampler {
            flex_mean: [35.0, 40.0],
            flex_sigma: [22.0, 25.0],
            spread_sigma: 7.0,
            thumb_sigma: [15.0, 20.0],
            global_rotation: 30.0,
            pixel_offset: [20.0, 15.0],
            depth_range: [350.0, 550.0],
        }
    }
}

fn clipped_normal<R: Rng>(rng: &mut R, mean: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    let v = if sigma > 0.0 {
        Normal::new(mean, sigma).unwrap().sample(rng)
    } else {
        mean
    };
    v.clamp(lo, hi)
}

impl HandSampler {
    pub fn sample_angles<R: Rng>(&self, rng: &mut R) -> FingerAngles {
        let mut a = FingerAngles::rest();
        for f in a.fingers.iter_mut() {
            f[0] = deg(clipped_normal(rng, 0.0, self.spread_sigma, -20.0, 20.0));
            f[1] = deg(clipped_normal(rng, self.flex_mean[0], self.flex_sigma[0], -10.0, 95.0));
            f[2] = deg(clipped_normal(rng, self.flex_mean[1], self.flex_sigma[1], 0.0, 110.0));
        }
        a.thumb[0] = deg(clipped_normal(rng, 0.0, self.thumb_sigma[0], -35.0, 35.0));
        a.thumb[1] = deg(clipped_normal(rng, 20.0, self.thumb_sigma[1], -20.0, 80.0));
        a
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, geometry: &HandGeometry, cam: &CameraIntrinsics) -> HandPose {
        let angles = self.sample_angles(rng);
        let g = self.global_rotation;
        let mut rot = || deg(rng.random_range(-g..=g));
        let (ax, ay, az) = (rot(), rot(), rot());
        let r = Rotation3::from_euler_angles(ax, ay, az);
        let z = rng.random_range(self.depth_range[0]..=self.depth_range[1]);
        let du = rng.random_range(-self.pixel_offset[0]..=self.pixel_offset[0]);
        let dv = rng.random_range(-self.pixel_offset[1]..=self.pixel_offset[1]);
        let t = cam.backproject(cam.cx + du, cam.cy + dv, z);
        let local = angles.joints(&geometry.anchors);
        HandPose::new(local.iter().map(|p| r * p + t).collect())
    }
}
