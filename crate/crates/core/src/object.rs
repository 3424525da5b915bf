//! Rigid objects made of convex primitives.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Convex primitive in the object frame. Cylinders are aligned with `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Primitive {
    Box { center: [f64; 3], half: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    Cylinder { center: [f64; 3], radius: f64, half_height: f64 },
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl Primitive {
    /// Signed distance from an object-frame point.
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            Primitive::Box { center, half } => {
                let q = (p - v3(center)).abs() - v3(half);
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.max().min(0.0)
            }
            Primitive::Sphere { center, radius } => (p - v3(center)).norm() - radius,
            Primitive::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let d = p - v3(center);
                let r = (d.x * d.x + d.y * d.y).sqrt() - radius;
                let h = d.z.abs() - half_height;
                let outside = (r.max(0.0).powi(2) + h.max(0.0).powi(2)).sqrt();
                outside + r.max(h).min(0.0)
            }
        }
    }

    /// Axis-aligned bounds `(min, max)` in the object frame.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        match *self {
            Primitive::Box { center, half } => (v3(center) - v3(half), v3(center) + v3(half)),
            Primitive::Sphere { center, radius } => {
                let r = Vector3::repeat(radius);
                (v3(center) - r, v3(center) + r)
            }
            Primitive::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let e = Vector3::new(radius, radius, half_height);
                (v3(center) - e, v3(center) + e)
            }
        }
    }

    /// Entry parameter `s > 0` of the ray `o + s d`, object frame.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match *self {
            Primitive::Box { center, half } => ray_box(&(o - v3(center)), d, &v3(half)),
            Primitive::Sphere { center, radius } => ray_sphere(o, d, &v3(center), radius),
            Primitive::Cylinder {
                center,
                radius,
                half_height,
            } => ray_cylinder(&(o - v3(center)), d, radius, half_height),
        }
    }
}

pub fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, half: &Vector3<f64>) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        if d[i].abs() < 1e-300 {
            if o[i].abs() > half[i] {
                return None;
            }
            continue;
        }
        let a = (-half[i] - o[i]) / d[i];
        let b = (half[i] - o[i]) / d[i];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

pub fn ray_sphere(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> Option<f64> {
    let oc = o - c;
    let a = d.norm_squared();
    let b = d.dot(&oc);
    let cc = oc.norm_squared() - r * r;
    let h = b * b - a * cc;
    if h < 0.0 {
        return None;
    }
    let s = (-b - h.sqrt()) / a;
    (s > 0.0).then_some(s)
}

fn ray_cylinder(o: &Vector3<f64>, d: &Vector3<f64>, r: f64, hh: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut keep = |s: f64| {
        if s > 0.0 && best.is_none_or(|b| s < b) {
            best = Some(s);
        }
    };
    let a = d.x * d.x + d.y * d.y;
    if a > 1e-300 {
        let b = o.x * d.x + o.y * d.y;
        let c = o.x * o.x + o.y * o.y - r * r;
        let h = b * b - a * c;
        if h >= 0.0 {
            let s = (-b - h.sqrt()) / a;
            if (o.z + s * d.z).abs() <= hh {
                keep(s);
            }
        }
    }
    if d.z.abs() > 1e-300 {
        for z in [-hh, hh] {
            let s = (z - o.z) / d.z;
            let (x, y) = (o.x + s * d.x, o.y + s * d.y);
            if x * x + y * y <= r * r {
                keep(s);
            }
        }
    }
    best
}

/// Entry parameter of a ray into the capsule around segment `a b`.
pub fn ray_capsule(o: &Vector3<f64>, d: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>, r: f64) -> Option<f64> {
    let mut best = ray_sphere(o, d, a, r);
    let mut keep = |s: Option<f64>| {
        if let Some(s) = s {
            if best.is_none_or(|b| s < b) {
                best = Some(s);
            }
        }
    };
    keep(ray_sphere(o, d, b, r));
    let ba = b - a;
    let oa = o - a;
    let baba = ba.norm_squared();
    if baba > 0.0 {
        let bard = ba.dot(d);
        let qa = baba * d.norm_squared() - bard * bard;
        if qa > 1e-12 * baba * d.norm_squared() {
            let baoa = ba.dot(&oa);
            let qb = baba * d.dot(&oa) - baoa * bard;
            let qc = baba * oa.norm_squared() - baoa * baoa - r * r * baba;
            let h = qb * qb - qa * qc;
            if h >= 0.0 {
                let s = (-qb - h.sqrt()) / qa;
                let y = baoa + s * bard;
                if s > 0.0 && y > 0.0 && y < baba {
                    keep(Some(s));
                }
            }
        }
    }
    best
}

/// Object as a union of convex primitives with its canonical bounding box
/// centred on the frame origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectModel {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub bbox_half: [f64; 3],
}

impl ObjectModel {
    pub fn new(name: &str, primitives: Vec<Primitive>, bbox_half: [f64; 3]) -> Result<Self> {
        if primitives.is_empty() {
            return invalid("object needs at least one primitive");
        }
        if bbox_half.iter().any(|h| !(*h > 0.0)) {
            return invalid("bounding box extents must be positive");
        }
        for p in &primitives {
            let (lo, hi) = p.bounds();
            for i in 0..3 {
                if lo[i] < -bbox_half[i] - 1e-9 || hi[i] > bbox_half[i] + 1e-9 {
                    return invalid(format!("primitive {p:?} leaves the bounding box"));
                }
            }
        }
        Ok(ObjectModel {
            name: name.into(),
            primitives,
            bbox_half,
        })
    }

    /// A hand-held cuboid.
    pub fn cuboid(half: [f64; 3]) -> Self {
        ObjectModel::new(
            "cuboid",
            vec![Primitive::Box {
                center: [0.0; 3],
                half,
            }],
            half,
        )
        .unwrap()
    }

    pub fn desk() -> Self {
        ObjectModel::cuboid([28.0, 20.0, 40.0])
    }

    /// Cylinder body with a box handle.
    pub fn mug() -> Self {
        ObjectModel::new(
            "mug",
            vec![
                Primitive::Cylinder {
                    center: [-8.0, 0.0, 0.0],
                    radius: 30.0,
                    half_height: 40.0,
                },
                Primitive::Box {
                    center: [30.0, 0.0, 0.0],
                    half: [8.0, 5.0, 25.0],
                },
            ],
            [38.0, 30.0, 40.0],
        )
        .unwrap()
    }

    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        self.primitives.iter().map(|q| q.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    /// Radius of the sphere around the origin enclosing the bounding box.
    pub fn bounding_radius(&self) -> f64 {
        Vector3::new(self.bbox_half[0], self.bbox_half[1], self.bbox_half[2]).norm()
    }
}
