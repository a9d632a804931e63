//! Registration metrics and forward-only training losses.

pub mod losses;

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{KdTree, RigidTransform};
use crate::matching::{PatchMatch, PointMatch};

pub use losses::{circle_loss, overlap_circle_loss, point_nll_loss, CircleLossConfig, NllOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricThresholds {
    /// Residual below which a point match is an inlier (m).
    pub inlier_threshold: f64,
    /// IR above which a pair counts toward FMR.
    pub fmr_threshold: f64,
    /// RMSE below which a pair counts as registered (m).
    pub rmse_threshold: f64,
    /// Member-point distance within which a patch match overlaps (m).
    pub patch_overlap_radius: f64,
    /// Radius pairing points into ground-truth correspondences for the RMSE (m).
    pub gt_correspondence_radius: f64,
    pub rre_threshold_deg: f64,
    pub rte_threshold_m: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        Self {
            inlier_threshold: 0.1,
            fmr_threshold: 0.05,
            rmse_threshold: 0.2,
            patch_overlap_radius: 0.1,
            gt_correspondence_radius: 0.1,
            rre_threshold_deg: 5.0,
            rte_threshold_m: 2.0,
        }
    }
}

/// `count / total`, defined as 0 when `total` is 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub count: usize,
    pub total: usize,
}

impl Ratio {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.count as f64 / self.total as f64
        }
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

/// A patch match is an inlier if some member pair lies within `radius` under `gt`.
pub fn patch_inlier_ratio(
    matches: &[PatchMatch],
    gt: &RigidTransform,
    patch_points_p: &[Vec<Point3<f64>>],
    patch_points_q: &[Vec<Point3<f64>>],
    radius: f64,
) -> Result<Ratio> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("overlap radius {radius}")));
    }
    let mut count = 0;
    for m in matches {
        let (Some(pp), Some(pq)) = (patch_points_p.get(m.p), patch_points_q.get(m.q)) else {
            return Err(Error::InvalidArgument(format!("patch match ({}, {}) out of range", m.p, m.q)));
        };
        if pp.is_empty() || pq.is_empty() {
            continue;
        }
        let tree = KdTree::new(pp);
        let hit = pq
            .iter()
            .any(|x| tree.nearest(&gt.apply(x)).is_some_and(|n| n.distance <= radius));
        if hit {
            count += 1;
        }
    }
    Ok(Ratio {
        count,
        total: matches.len(),
    })
}

/// Fraction of matches with `‖gt(x_Q) − x_P‖ < threshold`.
pub fn inlier_ratio(points_p: &[Point3<f64>], points_q: &[Point3<f64>], matches: &[PointMatch], gt: &RigidTransform, threshold: f64) -> Result<Ratio> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("inlier threshold {threshold}")));
    }
    let mut count = 0;
    for m in matches {
        let (Some(p), Some(q)) = (points_p.get(m.p), points_q.get(m.q)) else {
            return Err(Error::InvalidArgument(format!("point match ({}, {}) out of range", m.p, m.q)));
        };
        if (gt.apply(q) - p).norm() < threshold {
            count += 1;
        }
    }
    Ok(Ratio {
        count,
        total: matches.len(),
    })
}

/// Fraction of pairs whose IR exceeds `threshold`.
pub fn feature_matching_recall(inlier_ratios: &[f64], threshold: f64) -> f64 {
    if inlier_ratios.is_empty() {
        return 0.0;
    }
    inlier_ratios.iter().filter(|&&ir| ir > threshold).count() as f64 / inlier_ratios.len() as f64
}

/// `(p index, q index)` for every Q point whose nearest P point under `gt` is within `radius`.
pub fn gt_correspondences(points_p: &[Point3<f64>], points_q: &[Point3<f64>], gt: &RigidTransform, radius: f64) -> Vec<(usize, usize)> {
    if points_p.is_empty() {
        return Vec::new();
    }
    let tree = KdTree::new(points_p);
    points_q
        .iter()
        .enumerate()
        .filter_map(|(j, x)| {
            let n = tree.nearest(&gt.apply(x))?;
            (n.distance <= radius).then_some((n.index, j))
        })
        .collect()
}

/// `sqrt(mean ‖est(x_Q) − x_P‖²)` over ground-truth correspondences; `None` without any.
pub fn correspondence_rmse(est: &RigidTransform, points_p: &[Point3<f64>], points_q: &[Point3<f64>], corr: &[(usize, usize)]) -> Option<f64> {
    if corr.is_empty() {
        return None;
    }
    let sse: f64 = corr.iter().map(|&(i, j)| (est.apply(&points_q[j]) - points_p[i]).norm_squared()).sum();
    Some((sse / corr.len() as f64).sqrt())
}

/// Rotation angle of `R` in radians, accurate near 0 and π.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let skew = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    skew.norm().atan2((r.trace() - 1.0) / 2.0)
}

/// Relative rotation error and translation error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rre_deg: f64,
    pub rte_m: f64,
}

pub fn pose_errors(est: &RigidTransform, gt: &RigidTransform) -> PoseError {
    PoseError {
        rre_deg: rotation_angle(&(gt.rotation.transpose() * est.rotation)).to_degrees(),
        rte_m: (est.translation - gt.translation).norm(),
    }
}

impl PoseError {
    pub fn within(&self, t: &MetricThresholds) -> bool {
        self.rre_deg < t.rre_threshold_deg && self.rte_m < t.rte_threshold_m
    }
}

/// Metrics of one registration pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pir: Ratio,
    pub ir: Ratio,
    pub rmse: Option<f64>,
    pub registered: bool,
    pub pose: PoseError,
    pub pose_recall: bool,
    pub gt_correspondences: usize,
}

/// Metrics for one pair given the estimate and ground truth.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_pair(
    points_p: &[Point3<f64>],
    points_q: &[Point3<f64>],
    patch_matches: &[PatchMatch],
    patch_points_p: &[Vec<Point3<f64>>],
    patch_points_q: &[Vec<Point3<f64>>],
    point_matches: &[PointMatch],
    est: &RigidTransform,
    gt: &RigidTransform,
    t: &MetricThresholds,
) -> Result<PairMetrics> {
    let pir = patch_inlier_ratio(patch_matches, gt, patch_points_p, patch_points_q, t.patch_overlap_radius)?;
    let ir = inlier_ratio(points_p, points_q, point_matches, gt, t.inlier_threshold)?;
    let corr = gt_correspondences(points_p, points_q, gt, t.gt_correspondence_radius);
    let rmse = correspondence_rmse(est, points_p, points_q, &corr);
    let pose = pose_errors(est, gt);
    Ok(PairMetrics {
        pir,
        ir,
        rmse,
        registered: rmse.is_some_and(|r| r < t.rmse_threshold),
        pose_recall: pose.within(t),
        pose,
        gt_correspondences: corr.len(),
    })
}

/// Means over all pairs. Failed pairs (`None`) count as 0 / false; pose
/// errors are averaged over pairs with an estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub pairs: usize,
    pub failed: usize,
    pub pir: f64,
    pub ir: f64,
    pub fmr: f64,
    pub rr: f64,
    pub rre_deg: f64,
    pub rte_m: f64,
    pub pose_recall: f64,
}

pub fn summarize(per_pair: &[Option<&PairMetrics>], t: &MetricThresholds) -> MetricSummary {
    let n = per_pair.len();
    let ok: Vec<&PairMetrics> = per_pair.iter().flatten().copied().collect();
    let mean_all = |f: &dyn Fn(&PairMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            ok.iter().map(|m| f(m)).sum::<f64>() / n as f64
        }
    };
    let mean_ok = |f: &dyn Fn(&PairMetrics) -> f64| {
        if ok.is_empty() {
            0.0
        } else {
            ok.iter().map(|m| f(m)).sum::<f64>() / ok.len() as f64
        }
    };
    let irs: Vec<f64> = per_pair.iter().map(|m| m.map_or(0.0, |m| m.ir.value())).collect();
    MetricSummary {
        pairs: n,
        failed: n - ok.len(),
        pir: mean_all(&|m| m.pir.value()),
        ir: mean_all(&|m| m.ir.value()),
        fmr: feature_matching_recall(&irs, t.fmr_threshold),
        rr: mean_all(&|m| f64::from(u8::from(m.registered))),
        rre_deg: mean_ok(&|m| m.pose.rre_deg),
        rte_m: mean_ok(&|m| m.pose.rte_m),
        pose_recall: mean_all(&|m| f64::from(u8::from(m.pose_recall))),
    }
}
