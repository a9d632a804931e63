//! Rigid transform estimation from point correspondences.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::matching::PointMatch;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcrustesFit {
    pub transform: RigidTransform,
    /// Weighted root-mean-square residual of the fit.
    pub rmse: f64,
}

/// Minimizes `Σ w ‖R q + t − p‖²` over proper rotations.
pub fn weighted_procrustes(p: &[Point3<f64>], q: &[Point3<f64>], w: &[f64]) -> Result<ProcrustesFit> {
    if p.len() != q.len() || p.len() != w.len() {
        return Err(Error::shape("procrustes inputs", p.len(), q.len().min(w.len())));
    }
    if p.len() < 3 {
        return Err(Error::InsufficientCorrespondences);
    }
    if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument("procrustes weights must be finite and non-negative".into()));
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("procrustes weights sum to zero".into()));
    }
    let mean = |pts: &[Point3<f64>]| pts.iter().zip(w).fold(Vector3::zeros(), |acc, (x, &wi)| acc + x.coords * wi) / total;
    let (pbar, qbar) = (mean(p), mean(q));
    let mut h = Matrix3::zeros();
    for ((pi, qi), &wi) in p.iter().zip(q).zip(w) {
        h += wi * (qi.coords - qbar) * (pi.coords - pbar).transpose();
    }
    let svd = h.svd(true, true);
    let s = svd.singular_values;
    if !(s[1] > 1e-12 * s[0].max(f64::MIN_POSITIVE)) {
        return Err(Error::RankDeficient);
    }
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    let v = vt.transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let rotation = v * d * u.transpose();
    let translation = pbar - rotation * qbar;
    let transform = RigidTransform { rotation, translation };
    let sse: f64 = p
        .iter()
        .zip(q)
        .zip(w)
        .map(|((pi, qi), &wi)| wi * (transform.apply(qi) - pi).norm_squared())
        .sum();
    Ok(ProcrustesFit {
        transform,
        rmse: (sse / total).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub acceptance_radius: f64,
    pub refinement_iterations: usize,
    pub min_local_matches: usize,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            acceptance_radius: 0.1,
            refinement_iterations: 5,
            min_local_matches: 3,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.acceptance_radius > 0.0) {
            return Err(Error::Config(format!("acceptance radius {}", self.acceptance_radius)));
        }
        if self.min_local_matches < 3 {
            return Err(Error::Config("at least 3 local matches are needed per candidate".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LgrResult {
    pub transform: RigidTransform,
    /// Indices into the point matches, ascending.
    pub inliers: Vec<usize>,
    /// Patch-pair index of the winning candidate.
    pub candidate: usize,
    pub candidates_evaluated: usize,
    /// Inlier count after candidate selection and after each accepted refinement.
    pub inlier_history: Vec<usize>,
}

fn inliers_of(t: &RigidTransform, pp: &[Point3<f64>], pq: &[Point3<f64>], matches: &[PointMatch], radius: f64) -> Vec<usize> {
    matches
        .iter()
        .enumerate()
        .filter(|(_, m)| (t.apply(&pq[m.q]) - pp[m.p]).norm() < radius)
        .map(|(i, _)| i)
        .collect()
}

fn fit_subset(pp: &[Point3<f64>], pq: &[Point3<f64>], matches: &[PointMatch], subset: &[usize]) -> Result<ProcrustesFit> {
    let p: Vec<Point3<f64>> = subset.iter().map(|&i| pp[matches[i].p]).collect();
    let q: Vec<Point3<f64>> = subset.iter().map(|&i| pq[matches[i].q]).collect();
    let w: Vec<f64> = subset.iter().map(|&i| matches[i].conf).collect();
    weighted_procrustes(&p, &q, &w)
}

/// Local-to-global registration: one candidate per patch pair, scored by its
/// global inlier count, then refit on the inliers of the best candidate.
pub fn lgr(points_p: &[Point3<f64>], points_q: &[Point3<f64>], matches: &[PointMatch], cfg: &EstimationConfig) -> Result<LgrResult> {
    cfg.validate()?;
    if let Some(m) = matches.iter().find(|m| m.p >= points_p.len() || m.q >= points_q.len()) {
        return Err(Error::InvalidArgument(format!("point match ({}, {}) out of range", m.p, m.q)));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, m) in matches.iter().enumerate() {
        groups.entry(m.patch_pair).or_default().push(i);
    }
    let groups: Vec<(usize, Vec<usize>)> = groups.into_iter().filter(|(_, g)| g.len() >= cfg.min_local_matches).collect();
    let scored: Vec<(usize, RigidTransform, Vec<usize>)> = groups
        .par_iter()
        .filter_map(|(pair, idx)| {
            let fit = fit_subset(points_p, points_q, matches, idx).ok()?;
            let inl = inliers_of(&fit.transform, points_p, points_q, matches, cfg.acceptance_radius);
            Some((*pair, fit.transform, inl))
        })
        .collect();
    let evaluated = scored.len();
    let (candidate, mut transform, mut inliers) = scored
        .into_iter()
        .reduce(|best, c| if c.2.len() > best.2.len() { c } else { best })
        .ok_or(Error::InsufficientCorrespondences)?;
    let mut history = vec![inliers.len()];
    for _ in 0..cfg.refinement_iterations {
        if inliers.len() < 3 {
            break;
        }
        let Ok(fit) = fit_subset(points_p, points_q, matches, &inliers) else {
            break;
        };
        let next = inliers_of(&fit.transform, points_p, points_q, matches, cfg.acceptance_radius);
        if next.len() < inliers.len() {
            break;
        }
        let converged = next == inliers;
        transform = fit.transform;
        inliers = next;
        history.push(inliers.len());
        if converged {
            break;
        }
    }
    Ok(LgrResult {
        transform,
        inliers,
        candidate,
        candidates_evaluated: evaluated,
        inlier_history: history,
    })
}
