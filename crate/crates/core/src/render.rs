//! Analytic ray-cast z-buffer renderer and hand-object collision tests.

use nalgebra::{Matrix3, Vector3};

use crate::depth::{DepthImage, FAR_DEPTH};
use crate::error::Result;
use crate::geometry::CameraIntrinsics;
use crate::hand::HandGeometry;
use crate::object::{ray_capsule, ray_sphere, ObjectModel, Primitive};
use crate::pose::{HandPose, ObjectPose};

/// Primitive placed in camera space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Capsule { a: Vector3<f64>, b: Vector3<f64>, radius: f64 },
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Object-frame primitive under the rigid map `x -> R x + t`.
    Posed { primitive: Primitive, rotation: Matrix3<f64>, translation: Vector3<f64> },
}

impl Shape {
    fn bounding_sphere(&self) -> (Vector3<f64>, f64) {
        match *self {
            Shape::Capsule { a, b, radius } => ((a + b) / 2.0, (b - a).norm() / 2.0 + radius),
            Shape::Sphere { center, radius } => (center, radius),
            Shape::Posed {
                primitive,
                rotation,
                translation,
            } => {
                let (lo, hi) = primitive.bounds();
                (rotation * ((lo + hi) / 2.0) + translation, (hi - lo).norm() / 2.0)
            }
        }
    }

    /// Depth of the first surface along the unit-depth ray through the pixel.
    fn hit(&self, d: &Vector3<f64>) -> Option<f64> {
        let o = Vector3::zeros();
        match *self {
            Shape::Capsule { a, b, radius } => ray_capsule(&o, d, &a, &b, radius),
            Shape::Sphere { center, radius } => ray_sphere(&o, d, &center, radius),
            Shape::Posed {
                primitive,
                rotation,
                translation,
            } => {
                let rt = rotation.transpose();
                primitive.intersect(&(rt * -translation), &(rt * d))
            }
        }
    }
}

/// Conservative pixel window `(u0, u1, v0, v1)` of a bounding sphere, or
/// the whole image when it reaches the camera plane.
fn pixel_window(cam: &CameraIntrinsics, c: &Vector3<f64>, r: f64) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = (cam.width as f64, cam.height as f64);
    if c.z + r <= 0.0 {
        return None;
    }
    if c.z - r <= 1e-6 {
        return Some((0, cam.width - 1, 0, cam.height - 1));
    }
    let mut umin = f64::INFINITY;
    let mut umax = f64::NEG_INFINITY;
    let mut vmin = f64::INFINITY;
    let mut vmax = f64::NEG_INFINITY;
    for z in [c.z - r, c.z + r] {
        for x in [c.x - r, c.x + r] {
            let u = cam.fx * x / z + cam.cx;
            umin = umin.min(u);
            umax = umax.max(u);
        }
        for y in [c.y - r, c.y + r] {
            let v = cam.fy * y / z + cam.cy;
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
    }
    let u0 = (umin.floor() - 1.0).max(0.0);
    let u1 = (umax.ceil() + 1.0).min(w - 1.0);
    let v0 = (vmin.floor() - 1.0).max(0.0);
    let v1 = (vmax.ceil() + 1.0).min(h - 1.0);
    if u1 < u0 || v1 < v0 {
        return None;
    }
    Some((u0 as usize, u1 as usize, v0 as usize, v1 as usize))
}

/// Z-buffer render: every pixel holds the nearest surface depth, background
/// stays invalid.
pub fn render_shapes(shapes: &[Shape], cam: &CameraIntrinsics) -> DepthImage {
    let mut img = DepthImage::invalid(cam.width, cam.height);
    for s in shapes {
        let (c, r) = s.bounding_sphere();
        let Some((u0, u1, v0, v1)) = pixel_window(cam, &c, r) else {
            continue;
        };
        for v in v0..=v1 {
            for u in u0..=u1 {
                let d = cam.ray(u as f64, v as f64);
                if let Some(z) = s.hit(&d) {
                    let z = z as f32;
                    let px = &mut img.data[v * cam.width + u];
                    if z < *px {
                        *px = z;
                    }
                }
            }
        }
    }
    for px in img.data.iter_mut() {
        if *px >= FAR_DEPTH {
            *px = FAR_DEPTH;
        }
    }
    img
}

pub fn hand_shapes(pose: &HandPose, geometry: &HandGeometry) -> Result<Vec<Shape>> {
    Ok(geometry
        .capsules_for(pose)?
        .into_iter()
        .map(|(a, b, radius)| Shape::Capsule { a, b, radius })
        .collect())
}

pub fn object_shapes(pose: &ObjectPose, model: &ObjectModel) -> Vec<Shape> {
    model
        .primitives
        .iter()
        .map(|p| Shape::Posed {
            primitive: *p,
            rotation: pose.rotation,
            translation: pose.translation,
        })
        .collect()
}

pub fn render_hand(pose: &HandPose, geometry: &HandGeometry, cam: &CameraIntrinsics) -> Result<DepthImage> {
    Ok(render_shapes(&hand_shapes(pose, geometry)?, cam))
}

pub fn render_object(pose: &ObjectPose, model: &ObjectModel, cam: &CameraIntrinsics) -> Result<DepthImage> {
    let pose = ObjectPose::new(pose.rotation, pose.translation)?;
    Ok(render_shapes(&object_shapes(&pose, model), cam))
}

/// Smallest signed distance between a capsule surface and the object, by
/// ternary search of the convex primitive SDFs along the capsule axis.
pub fn capsule_object_distance(a: &Vector3<f64>, b: &Vector3<f64>, radius: f64, pose: &ObjectPose, model: &ObjectModel) -> f64 {
    let rt = pose.rotation.transpose();
    let la = rt * (a - pose.translation);
    let lb = rt * (b - pose.translation);
    let mut best = f64::INFINITY;
    for prim in &model.primitives {
        let f = |s: f64| prim.sdf(&(la + (lb - la) * s));
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..80 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if f(m1) <= f(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        let d = f((lo + hi) / 2.0).min(f(0.0)).min(f(1.0));
        best = best.min(d);
    }
    best - radius
}

/// Minimum clearance between any hand capsule and the object.
pub fn hand_object_clearance(hand: &HandPose, geometry: &HandGeometry, pose: &ObjectPose, model: &ObjectModel) -> Result<f64> {
    Ok(geometry
        .capsules_for(hand)?
        .iter()
        .map(|(a, b, r)| capsule_object_distance(a, b, *r, pose, model))
        .fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_on_axis_front_depth() {
        let cam = CameraIntrinsics::desk();
        // put the sphere centre on the ray through pixel (80, 60)
        let c = cam.ray(80.0, 60.0) * 400.0;
        let img = render_shapes(&[Shape::Sphere { center: c, radius: 20.0 }], &cam);
        let z = img.at(80, 60) as f64;
        let n = cam.ray(80.0, 60.0).norm();
        // depth of the near hit along a ray through the centre
        let want = 400.0 - 20.0 / n;
        assert!((z - want).abs() < 1e-3, "{z} vs {want}");
        assert!(!img.is_valid(0));
    }

    #[test]
    fn behind_camera_renders_nothing() {
        let cam = CameraIntrinsics::desk();
        let img = render_shapes(
            &[Shape::Sphere {
                center: Vector3::new(0.0, 0.0, -300.0),
                radius: 20.0,
            }],
            &cam,
        );
        assert_eq!(img.valid_count(), 0);
    }

    #[test]
    fn capsule_distance_to_box() {
        let model = ObjectModel::cuboid([10.0, 10.0, 10.0]);
        let pose = ObjectPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 400.0)).unwrap();
        let d = capsule_object_distance(
            &Vector3::new(-50.0, 30.0, 400.0),
            &Vector3::new(50.0, 30.0, 400.0),
            5.0,
            &pose,
            &model,
        );
        assert!((d - 15.0).abs() < 1e-9);
    }
}
