//! Point clouds, rigid transforms and patch construction.
//!
//! Patches are the coarse registration unit: a voxel-grid subsample of the
//! cloud where every point belongs to exactly one patch.

pub mod io;
mod kdtree;

use std::collections::HashMap;

use nalgebra::{DMatrix, Matrix3, Matrix4, Point3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

pub use kdtree::{KdTree, Neighbor};

use crate::error::{Error, Result};

/// Raw 3D points with optional dense per-point features (one row per point).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub features: Option<DMatrix<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(format!("point {i}")));
        }
        Ok(Self {
            points,
            features: None,
        })
    }

    pub fn with_features(mut self, features: DMatrix<f64>) -> Result<Self> {
        if features.nrows() != self.points.len() {
            return Err(Error::shape("point features", self.points.len(), features.nrows()));
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Proper rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-6;

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation,
        }
    }

    pub fn rotation_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle, Vector3::zeros())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite entry".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOL {
            return Err(Error::InvalidTransform(format!("rotation not orthonormal (error {err:e})")));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidTransform(format!("rotation determinant {det}")));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self> {
        Self::new(m.fixed_view::<3, 3>(0, 0).into_owned(), m.fixed_view::<3, 1>(0, 3).into_owned())
    }
}

/// Serialized form: row-major rotation and translation arrays.
#[derive(Serialize, Deserialize)]
struct TransformRepr {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let r = &self.rotation;
        TransformRepr {
            rotation: [
                r[(0, 0)], r[(0, 1)], r[(0, 2)],
                r[(1, 0)], r[(1, 1)], r[(1, 2)],
                r[(2, 0)], r[(2, 1)], r[(2, 2)],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = TransformRepr::deserialize(d)?;
        RigidTransform::new(
            Matrix3::from_row_slice(&repr.rotation),
            Vector3::from_column_slice(&repr.translation),
        )
        .map_err(serde::de::Error::custom)
    }
}

/// Coarse patches: centers, point→patch assignment, optional patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<Point3<f64>>,
    pub assignment: Vec<usize>,
    pub features: Option<DMatrix<f64>>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Point indices owned by each patch, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.centers.len()];
        for (point, &patch) in self.assignment.iter().enumerate() {
            out[patch].push(point);
        }
        out
    }
}

fn voxel_key(p: &Point3<f64>, voxel: f64) -> (i64, i64, i64) {
    (
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    )
}

/// Voxel-grid subsampling: one patch per occupied voxel, centered on the
/// centroid of its points. Patches are numbered by first occurrence.
pub fn grid_subsample(cloud: &PointCloud, voxel_size: f64) -> Result<PatchSet> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::InvalidArgument(format!("voxel size {voxel_size}")));
    }
    let mut slots: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut sums: Vec<(Vector3<f64>, usize)> = Vec::new();
    let mut assignment = Vec::with_capacity(cloud.len());
    for p in &cloud.points {
        let next = sums.len();
        let slot = *slots.entry(voxel_key(p, voxel_size)).or_insert(next);
        if slot == next {
            sums.push((Vector3::zeros(), 0));
        }
        sums[slot].0 += p.coords;
        sums[slot].1 += 1;
        assignment.push(slot);
    }
    let centers = sums
        .into_iter()
        .map(|(s, n)| Point3::from(s / n as f64))
        .collect();
    Ok(PatchSet {
        centers,
        assignment,
        features: None,
    })
}

/// Nearest-center assignment, ties to the lowest center index.
pub fn assign_points_to_patches(points: &[Point3<f64>], centers: &[Point3<f64>]) -> Result<Vec<usize>> {
    if centers.is_empty() {
        return Err(Error::EmptyInput);
    }
    let tree = KdTree::new(centers);
    Ok(points
        .iter()
        .map(|p| tree.nearest(p).map(|n| n.index).unwrap_or(0))
        .collect())
}

pub fn apply_transform(transform: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| transform.apply(p)).collect(),
        features: cloud.features.clone(),
    }
}

/// Exact k nearest neighbors of every query point in `reference`.
pub fn knn(query: &[Point3<f64>], reference: &[Point3<f64>], k: usize) -> Result<Vec<Vec<Neighbor>>> {
    if k > reference.len() {
        return Err(Error::KTooLarge {
            k,
            available: reference.len(),
        });
    }
    let tree = KdTree::new(reference);
    Ok(query.iter().map(|q| tree.knn(q, k)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapDirection {
    /// Fraction of P with a partner in T(Q).
    #[default]
    SourceToTarget,
    /// Minimum of both directions.
    Symmetric,
}

fn covered_fraction(points: &[Point3<f64>], tree: &KdTree, tau: f64) -> f64 {
    let hits = points
        .iter()
        .filter(|p| tree.nearest(p).is_some_and(|n| n.distance <= tau))
        .count();
    hits as f64 / points.len() as f64
}

/// Fraction of `p` points whose nearest neighbor in `T_gt(q)` lies within `tau`.
pub fn overlap_ratio(
    p: &PointCloud,
    q: &PointCloud,
    gt: &RigidTransform,
    tau: f64,
    direction: OverlapDirection,
) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("overlap radius {tau}")));
    }
    let q_moved: Vec<Point3<f64>> = q.points.iter().map(|x| gt.apply(x)).collect();
    let forward = covered_fraction(&p.points, &KdTree::new(&q_moved), tau);
    Ok(match direction {
        OverlapDirection::SourceToTarget => forward,
        OverlapDirection::Symmetric => {
            let backward = covered_fraction(&q_moved, &KdTree::new(&p.points), tau);
            forward.min(backward)
        }
    })
}
