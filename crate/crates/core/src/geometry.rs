//! Pinhole camera, center-of-mass localization, metric cube crops and the
//! spatial transformer pair.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::depth::{DepthImage, FAR_DEPTH};
use crate::error::{invalid, CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return invalid("focal lengths must be positive");
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return invalid("principal point outside image");
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// 160x120 sensor with the principal point at the image centre.
    pub fn desk() -> Self {
        CameraIntrinsics {
            fx: 140.0,
            fy: 140.0,
            cx: 79.5,
            cy: 59.5,
            width: 160,
            height: 120,
        }
    }

    /// `(u, v, z)` with pixel centres at integer coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> Result<(f64, f64, f64)> {
        if p.z <= 0.0 {
            return Err(CoreError::BehindCamera(p.z));
        }
        Ok((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy, p.z))
    }

    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Unit-depth ray through pixel `(u, v)`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Half-extents `c` of the metric cube, mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubeSpec {
    pub half: [f64; 3],
}

impl CubeSpec {
    pub fn uniform(c: f64) -> Self {
        CubeSpec { half: [c; 3] }
    }

    pub fn vec(&self) -> Vector3<f64> {
        Vector3::new(self.half[0], self.half[1], self.half[2])
    }
}

/// Affine map from the target grid `[-1, 1]^2` to source pixels plus the
/// depth window of the cube.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform {
    pub a: Matrix3<f64>,
    pub center: Vector3<f64>,
    pub cube: CubeSpec,
    pub size: usize,
}

impl CropTransform {
    pub fn depth_half(&self) -> f64 {
        self.cube.half[2]
    }

    /// Target grid coordinate of patch index `i` (inclusive linspace).
    #[inline]
    pub fn grid(&self, i: usize) -> f64 {
        if self.size == 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (self.size - 1) as f64
        }
    }

    pub fn inverse(&self) -> Result<Matrix3<f64>> {
        self.a
            .try_inverse()
            .ok_or_else(|| CoreError::Degenerate("singular crop transform".into()))
    }

    /// Depth value mapped to `[-1, 1]` with clipping; invalid goes rear.
    #[inline]
    pub fn normalize_depth(&self, d: f32) -> f64 {
        if d >= FAR_DEPTH {
            return 1.0;
        }
        ((d as f64 - self.center.z) / self.depth_half()).clamp(-1.0, 1.0)
    }

    #[inline]
    pub fn denormalize_depth(&self, n: f64) -> f64 {
        self.center.z + n * self.depth_half()
    }

    /// Cube-frame coordinates of a camera-space point.
    pub fn to_cube(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.center).component_div(&self.cube.vec())
    }

    pub fn from_cube(&self, q: &Vector3<f64>) -> Vector3<f64> {
        self.center + q.component_mul(&self.cube.vec())
    }
}

/// `A = [[xd/2, 0, x- + xd/2], [0, yd/2, y- + yd/2], [0, 0, 1]]` with
/// `(x+-, y+-) = proj(t +- c)`, the lateral box corners taken at depth `t_z`.
pub fn compute_crop_transform(t: &Vector3<f64>, cube: &CubeSpec, cam: &CameraIntrinsics, size: usize) -> Result<CropTransform> {
    if t.z <= 0.0 {
        return Err(CoreError::BehindCamera(t.z));
    }
    if t.z <= cube.half[2] {
        return invalid(format!("cube centre depth {} within half-extent {}", t.z, cube.half[2]));
    }
    if cube.half.iter().any(|c| *c <= 0.0) || size == 0 {
        return invalid("cube extents and output size must be positive");
    }
    let (xp, yp, _) = cam.project(&Vector3::new(t.x + cube.half[0], t.y + cube.half[1], t.z))?;
    let (xm, ym, _) = cam.project(&Vector3::new(t.x - cube.half[0], t.y - cube.half[1], t.z))?;
    let (xd, yd) = (xp - xm, yp - ym);
    #[rustfmt::skip]
    let a = Matrix3::new(
        xd / 2.0, 0.0, xm + xd / 2.0,
        0.0, yd / 2.0, ym + yd / 2.0,
        0.0, 0.0, 1.0,
    );
    Ok(CropTransform {
        a,
        center: *t,
        cube: *cube,
        size,
    })
}

/// Bilinear sample of `f` at source position `(xs, ys)`:
/// `sum_hw f[h,w] max(0, 1-|xs-w|) max(0, 1-|ys-h|)` restricted to the four
/// neighbours, with positions outside the image reading `outside`.
#[inline]
pub fn bilinear<F: Fn(usize, usize) -> f64>(f: &F, width: usize, height: usize, xs: f64, ys: f64, outside: f64) -> f64 {
    let x0 = xs.floor();
    let y0 = ys.floor();
    let fx = xs - x0;
    let fy = ys - y0;
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        if wy == 0.0 {
            continue;
        }
        let yy = y0 + dy;
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            if wx == 0.0 {
                continue;
            }
            let xx = x0 + dx;
            let v = if xx >= 0.0 && yy >= 0.0 && (xx as usize) < width && (yy as usize) < height {
                f(yy as usize, xx as usize)
            } else {
                outside
            };
            acc += wx * wy * v;
        }
    }
    acc
}

/// Generic STN: sample `f` over the `size x size` target grid of `ct`.
pub fn stn_sample_with<F: Fn(usize, usize) -> f64>(f: F, width: usize, height: usize, ct: &CropTransform, outside: f64) -> Vec<f64> {
    let n = ct.size;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let yt = ct.grid(i);
        for j in 0..n {
            let xt = ct.grid(j);
            let xs = ct.a[(0, 0)] * xt + ct.a[(0, 1)] * yt + ct.a[(0, 2)];
            let ys = ct.a[(1, 0)] * xt + ct.a[(1, 1)] * yt + ct.a[(1, 2)];
            out.push(bilinear(&f, width, height, xs, ys, outside));
        }
    }
    out
}

/// STN on raw depth values; samples outside the image contribute 0.
pub fn stn_sample(d: &DepthImage, ct: &CropTransform) -> Vec<f64> {
    stn_sample_with(|h, w| d.data[h * d.width + w] as f64, d.width, d.height, ct, 0.0)
}

/// Normalized metric crop: depths clipped to the cube window and mapped to
/// `[-1, 1]`, missing and out-of-frame pixels at +1. The flag is set when
/// the crop lies entirely outside the image.
pub fn crop_cube(d: &DepthImage, center: &Vector3<f64>, cube: &CubeSpec, cam: &CameraIntrinsics, size: usize) -> Result<(Vec<f64>, bool)> {
    let ct = compute_crop_transform(center, cube, cam, size)?;
    Ok(crop_with(d, &ct))
}

pub fn crop_with(d: &DepthImage, ct: &CropTransform) -> (Vec<f64>, bool) {
    let patch = stn_sample_with(|h, w| ct.normalize_depth(d.data[h * d.width + w]), d.width, d.height, ct, 1.0);
    let (x0, y0) = (ct.a[(0, 2)] - ct.a[(0, 0)], ct.a[(1, 2)] - ct.a[(1, 1)]);
    let (x1, y1) = (ct.a[(0, 2)] + ct.a[(0, 0)], ct.a[(1, 2)] + ct.a[(1, 1)]);
    let outside = x1 < 0.0 || y1 < 0.0 || x0 > (d.width - 1) as f64 || y0 > (d.height - 1) as f64;
    (patch, outside)
}

/// Canvas pixel bounds `(u0, u1, v0, v1)` inclusive covered by the crop.
pub fn crop_bounds(ct: &CropTransform, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let (x0, x1) = (ct.a[(0, 2)] - ct.a[(0, 0)].abs(), ct.a[(0, 2)] + ct.a[(0, 0)].abs());
    let (y0, y1) = (ct.a[(1, 2)] - ct.a[(1, 1)].abs(), ct.a[(1, 2)] + ct.a[(1, 1)].abs());
    let u0 = x0.ceil().max(0.0);
    let v0 = y0.ceil().max(0.0);
    let u1 = x1.floor().min(width as f64 - 1.0);
    let v1 = y1.floor().min(height as f64 - 1.0);
    if u1 < u0 || v1 < v0 {
        return None;
    }
    Some((u0 as usize, u1 as usize, v0 as usize, v1 as usize))
}

/// ISTN: write the bilinearly sampled patch (through `A^-1`) onto every
/// canvas pixel covered by the crop; other canvas pixels are untouched.
pub fn istn_paste_values(patch: &[f64], ct: &CropTransform, canvas: &mut [f64], width: usize, height: usize) -> Result<()> {
    let n = ct.size;
    if patch.len() != n * n || canvas.len() != width * height {
        return invalid("patch or canvas size does not match the transform");
    }
    let inv = ct.inverse()?;
    let Some((u0, u1, v0, v1)) = crop_bounds(ct, width, height) else {
        return Ok(());
    };
    let scale = (n.max(2) - 1) as f64 / 2.0;
    let f = |h: usize, w: usize| patch[h * n + w];
    for v in v0..=v1 {
        for u in u0..=u1 {
            let xt = inv[(0, 0)] * u as f64 + inv[(0, 1)] * v as f64 + inv[(0, 2)];
            let yt = inv[(1, 0)] * u as f64 + inv[(1, 1)] * v as f64 + inv[(1, 2)];
            if xt.abs() > 1.0 + 1e-12 || yt.abs() > 1.0 + 1e-12 {
                continue;
            }
            let px = ((xt + 1.0) * scale).clamp(0.0, (n - 1) as f64);
            let py = ((yt + 1.0) * scale).clamp(0.0, (n - 1) as f64);
            canvas[v * width + u] = bilinear(&f, n, n, px, py, 0.0);
        }
    }
    Ok(())
}

/// ISTN of a metric patch onto a depth canvas. Patch values at or beyond
/// [`FAR_DEPTH`] stay invalid.
pub fn istn_paste(patch: &[f64], ct: &CropTransform, canvas: &DepthImage) -> Result<DepthImage> {
    let mut vals: Vec<f64> = canvas.data.iter().map(|d| *d as f64).collect();
    istn_paste_values(patch, ct, &mut vals, canvas.width, canvas.height)?;
    Ok(DepthImage {
        width: canvas.width,
        height: canvas.height,
        data: vals.into_iter().map(|d| (d as f32).min(FAR_DEPTH)).collect(),
    })
}

/// Foreground depth band used by [`center_of_mass`], mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthBand {
    pub near: f64,
    pub far: f64,
}

impl Default for DepthBand {
    fn default() -> Self {
        DepthBand { near: 100.0, far: 1500.0 }
    }
}

/// Mean of the backprojected valid pixels inside the depth band.
pub fn center_of_mass(d: &DepthImage, cam: &CameraIntrinsics, band: DepthBand) -> Result<Vector3<f64>> {
    let mut sum = Vector3::zeros();
    let mut count = 0usize;
    for v in 0..d.height {
        for u in 0..d.width {
            let z = d.at(u, v) as f64;
            if z < FAR_DEPTH as f64 && z >= band.near && z <= band.far {
                sum += cam.backproject(u as f64, v as f64, z);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(CoreError::EmptyForeground);
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = CameraIntrinsics::desk();
        let (u, v, z) = cam.project(&Vector3::new(0.0, 0.0, 420.0)).unwrap();
        assert_eq!((u, v, z), (cam.cx, cam.cy, 420.0));
        assert!(cam.project(&Vector3::new(1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn doubling_depth_halves_offset() {
        let cam = CameraIntrinsics::desk();
        let (u1, v1, _) = cam.project(&Vector3::new(30.0, -20.0, 300.0)).unwrap();
        let (u2, v2, _) = cam.project(&Vector3::new(30.0, -20.0, 600.0)).unwrap();
        assert!(((u1 - cam.cx) - 2.0 * (u2 - cam.cx)).abs() < 1e-12);
        assert!(((v1 - cam.cy) - 2.0 * (v2 - cam.cy)).abs() < 1e-12);
    }

    #[test]
    fn unit_corner_maps_to_plus_corner() {
        let cam = CameraIntrinsics::desk();
        let t = Vector3::new(20.0, -10.0, 450.0);
        let cube = CubeSpec::uniform(125.0);
        let ct = compute_crop_transform(&t, &cube, &cam, 64).unwrap();
        let (xp, yp, _) = cam.project(&Vector3::new(t.x + 125.0, t.y + 125.0, t.z)).unwrap();
        let s = ct.a * Vector3::new(1.0, 1.0, 1.0);
        assert!((s.x - xp).abs() < 1e-12 && (s.y - yp).abs() < 1e-12);
    }

    #[test]
    fn flat_plane_at_center_crops_to_zero() {
        let cam = CameraIntrinsics::desk();
        let d = DepthImage::from_data(160, 120, vec![450.0; 160 * 120]).unwrap();
        let (p, out) = crop_cube(&d, &Vector3::new(0.0, 0.0, 450.0), &CubeSpec::uniform(100.0), &cam, 32).unwrap();
        assert!(!out);
        assert!(p.iter().all(|v| v.abs() < 1e-12));
        let near = DepthImage::from_data(160, 120, vec![350.0; 160 * 120]).unwrap();
        let (p, _) = crop_cube(&near, &Vector3::new(0.0, 0.0, 450.0), &CubeSpec::uniform(100.0), &cam, 32).unwrap();
        assert!(p.iter().all(|v| (*v + 1.0).abs() < 1e-12));
    }

    #[test]
    fn crop_outside_image_is_all_rear_and_flagged() {
        let cam = CameraIntrinsics::desk();
        let d = DepthImage::from_data(160, 120, vec![450.0; 160 * 120]).unwrap();
        let (p, out) = crop_cube(&d, &Vector3::new(5000.0, 0.0, 450.0), &CubeSpec::uniform(100.0), &cam, 16).unwrap();
        assert!(out);
        assert!(p.iter().all(|v| (*v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn center_of_mass_single_pixel_and_empty() {
        let cam = CameraIntrinsics::desk();
        let mut d = DepthImage::invalid(160, 120);
        assert!(matches!(center_of_mass(&d, &cam, DepthBand::default()), Err(CoreError::EmptyForeground)));
        d.data[30 * 160 + 100] = 500.0;
        let c = center_of_mass(&d, &cam, DepthBand::default()).unwrap();
        assert!((c - cam.backproject(100.0, 30.0, 500.0)).norm() < 1e-9);
    }

    #[test]
    fn symmetric_square_com_on_axis() {
        let cam = CameraIntrinsics::desk();
        let mut d = DepthImage::invalid(160, 120);
        for v in 50..70 {
            for u in 70..90 {
                d.data[v * 160 + u] = 400.0;
            }
        }
        let c = center_of_mass(&d, &cam, DepthBand::default()).unwrap();
        assert!(c.x.abs() < 1e-9 && c.y.abs() < 1e-9 && (c.z - 400.0).abs() < 1e-9);
    }
}
