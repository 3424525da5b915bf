//! Pose error metrics, error histograms and the rank test used to compare
//! error distributions.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::depth::{composite_min, DepthImage};
use crate::error::{invalid, Result};
use crate::geometry::CameraIntrinsics;
use crate::hand::HandGeometry;
use crate::object::ObjectModel;
use crate::pose::{corners_from_pose, CornerSet, HandPose, ObjectPose};
use crate::render::{render_hand, render_object};

/// Mean Euclidean joint distance.
pub fn mean_joint_error(pred: &HandPose, gt: &HandPose) -> Result<f64> {
    if pred.num_joints() != gt.num_joints() || gt.num_joints() == 0 {
        return invalid(format!("joint count mismatch: {} vs {}", pred.num_joints(), gt.num_joints()));
    }
    Ok(pred.joints.iter().zip(&gt.joints).map(|(a, b)| (a - b).norm()).sum::<f64>() / gt.num_joints() as f64)
}

/// Visible fingertips and annotated object corners of one scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilitySet {
    pub fingertips: Vec<usize>,
    pub corners: [usize; 3],
    pub corners_visible: usize,
}

impl VisibilitySet {
    /// 3 when all annotated corners are visible, else 0.
    pub fn indicator(&self) -> usize {
        if self.corners_visible == 3 {
            3
        } else {
            0
        }
    }
}

pub const VISIBILITY_TOLERANCE: f64 = 10.0;

/// A point is visible when the rendered depth at its pixel is within
/// [`VISIBILITY_TOLERANCE`] of its own depth.
pub fn point_visible(p: &Vector3<f64>, rendered: &DepthImage, cam: &CameraIntrinsics) -> bool {
    let Ok((u, v, z)) = cam.project(p) else {
        return false;
    };
    let (u, v) = (u.round(), v.round());
    if u < 0.0 || v < 0.0 || u >= rendered.width as f64 || v >= rendered.height as f64 {
        return false;
    }
    (rendered.at(u as usize, v as usize) as f64 - z).abs() <= VISIBILITY_TOLERANCE
}

/// The three box corners nearest the camera centre.
pub fn annotated_corners(corners: &CornerSet) -> [usize; 3] {
    let mut idx: Vec<usize> = (0..8).collect();
    idx.sort_by(|a, b| corners[*a].norm().total_cmp(&corners[*b].norm()));
    [idx[0], idx[1], idx[2]]
}

/// Visibility of the fingertips and annotated corners in the clean render
/// of the ground-truth scene.
pub fn visibility(
    hand: &HandPose,
    geometry: &HandGeometry,
    object: Option<(&ObjectPose, &ObjectModel)>,
    cam: &CameraIntrinsics,
) -> Result<VisibilitySet> {
    let mut img = render_hand(hand, geometry, cam)?;
    let mut corners = [0, 1, 2];
    let mut corners_visible = 0;
    if let Some((pose, model)) = object {
        img = composite_min(&img, &render_object(pose, model, cam)?)?;
        let c = corners_from_pose(pose, &model.bbox_half);
        corners = annotated_corners(&c);
        corners_visible = corners.iter().filter(|i| point_visible(&c[**i], &img, cam)).count();
    }
    let fingertips = geometry
        .fingertips
        .iter()
        .copied()
        .filter(|i| point_visible(&hand.joints[*i], &img, cam))
        .collect();
    Ok(VisibilitySet {
        fingertips,
        corners,
        corners_visible,
    })
}

/// `E = (sum_{i in V} |X_i - G_i| + (1_M / 3) sum_m |Y_m - F_m|) / (|V| + 1_M)`.
/// `None` when nothing is visible.
pub fn combined_metric_e(x: &[Vector3<f64>], g: &[Vector3<f64>], vis: &VisibilitySet, y: &CornerSet, f: &CornerSet) -> Option<f64> {
    let m = vis.indicator();
    let denom = vis.fingertips.len() + m;
    if denom == 0 {
        return None;
    }
    let hand: f64 = vis.fingertips.iter().map(|i| (x[*i] - g[*i]).norm()).sum();
    let obj: f64 = vis.corners.iter().map(|i| (y[*i] - f[*i]).norm()).sum();
    Some((hand + m as f64 / 3.0 * obj) / denom as f64)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Counts in `bins` bins of width `width` starting at 0; values beyond the
/// last edge land in the last bin.
pub fn histogram(v: &[f64], width: f64, bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    for x in v {
        if x.is_finite() && *x >= 0.0 && bins > 0 {
            h[((x / width) as usize).min(bins - 1)] += 1;
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    MeanJointError,
    CombinedE,
    PixelError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub kind: MetricKind,
    pub label: String,
    pub per_sample: Vec<f64>,
    /// Sample indices excluded from the aggregates.
    pub skipped: Vec<usize>,
    pub mean: f64,
    pub median: f64,
    pub histogram: Vec<usize>,
}

impl MetricReport {
    pub fn new(kind: MetricKind, label: &str, per_sample: Vec<f64>, skipped: Vec<usize>) -> Self {
        MetricReport {
            kind,
            label: label.to_string(),
            mean: mean(&per_sample),
            median: median(&per_sample),
            histogram: histogram(&per_sample, 1.0, 50),
            per_sample,
            skipped,
        }
    }

    /// Rebuilds the aggregates from the per-sample values and compares.
    pub fn is_consistent(&self) -> bool {
        let r = MetricReport::new(self.kind, &self.label, self.per_sample.clone(), self.skipped.clone());
        r.histogram == self.histogram && same(r.mean, self.mean) && same(r.median, self.median)
    }
}

fn same(a: f64, b: f64) -> bool {
    a == b || (a.is_nan() && b.is_nan())
}

/// One-sided Mann-Whitney U test of `H1: x tends to be smaller than y`,
/// normal approximation with tie correction. Returns `(U_x, p)`.
pub fn mann_whitney_less(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let (n1, n2) = (x.len(), y.len());
    if n1 == 0 || n2 == 0 {
        return invalid("empty sample");
    }
    let mut all: Vec<(f64, usize)> = x.iter().map(|v| (*v, 0)).chain(y.iter().map(|v| (*v, 1))).collect();
    if all.iter().any(|(v, _)| !v.is_finite()) {
        return invalid("non-finite sample");
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        ranks[i..=j].iter_mut().for_each(|v| *v = r);
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let r1: f64 = all.iter().zip(&ranks).filter(|((_, g), _)| *g == 0).map(|(_, r)| r).sum();
    let (n1f, n2f, nf) = (n1 as f64, n2 as f64, n as f64);
    let u1 = r1 - n1f * (n1f + 1.0) / 2.0;
    let mu = n1f * n2f / 2.0;
    let var = n1f * n2f / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)).max(1.0));
    if var <= 0.0 {
        return Ok((u1, 1.0));
    }
    let z = (u1 - mu + 0.5) / var.sqrt();
    let p = Normal::standard().cdf(z);
    Ok((u1, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(n: usize, z: f64) -> HandPose {
        HandPose::new((0..n).map(|i| Vector3::new(i as f64, 0.0, z)).collect())
    }

    #[test]
    fn joint_error_of_shift() {
        assert_eq!(mean_joint_error(&pose(14, 400.0), &pose(14, 400.0)).unwrap(), 0.0);
        assert!((mean_joint_error(&pose(14, 410.0), &pose(14, 400.0)).unwrap() - 10.0).abs() < 1e-12);
        assert!(mean_joint_error(&pose(13, 0.0), &pose(14, 0.0)).is_err());
    }

    fn corners(off: f64) -> CornerSet {
        std::array::from_fn(|i| Vector3::new(i as f64 + off, 0.0, 0.0))
    }

    #[test]
    fn e_hand_only() {
        let g: Vec<_> = (0..14).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let x: Vec<_> = g.iter().map(|p| p + Vector3::new(0.0, 6.0, 0.0)).collect();
        let vis = VisibilitySet {
            fingertips: vec![5, 7, 9, 11, 13],
            corners: [0, 1, 2],
            corners_visible: 2,
        };
        let e = combined_metric_e(&x, &g, &vis, &corners(0.0), &corners(0.0)).unwrap();
        assert!((e - 6.0).abs() < 1e-12);
    }

    #[test]
    fn e_with_object() {
        let g: Vec<_> = (0..14).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let x: Vec<_> = g.iter().map(|p| p + Vector3::new(0.0, 10.0, 0.0)).collect();
        let vis = VisibilitySet {
            fingertips: vec![5, 7],
            corners: [0, 1, 2],
            corners_visible: 3,
        };
        let e = combined_metric_e(&x, &g, &vis, &corners(12.0), &corners(0.0)).unwrap();
        assert!((e - (20.0 + 36.0) / 5.0).abs() < 1e-12);
        let none = VisibilitySet {
            fingertips: vec![],
            corners: [0, 1, 2],
            corners_visible: 1,
        };
        assert!(combined_metric_e(&x, &g, &none, &corners(0.0), &corners(0.0)).is_none());
    }

    #[test]
    fn histogram_and_median() {
        let v = [0.5, 1.5, 1.7, 70.0];
        assert_eq!(&histogram(&v, 1.0, 50)[..3], &[1, 2, 0]);
        assert_eq!(histogram(&v, 1.0, 50)[49], 1);
        assert_eq!(median(&v), 1.6);
    }

    #[test]
    fn mann_whitney_small_case() {
        // Hand computation: U_x = 0 for fully separated samples.
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let y = [11.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0, 18.0];
        let (u, p) = mann_whitney_less(&x, &y).unwrap();
        assert_eq!(u, 0.0);
        assert!(p < 0.001);
        let (u2, p2) = mann_whitney_less(&y, &x).unwrap();
        assert_eq!(u2, 64.0);
        assert!(p2 > 0.99);
    }

    #[test]
    fn report_recomputes() {
        let r = MetricReport::new(MetricKind::MeanJointError, "t", vec![3.0, 1.0, 2.0], vec![]);
        assert_eq!(r.mean, 2.0);
        assert!(r.is_consistent());
    }
}
