//! Handcrafted geometric features standing in for a learned 3D backbone.

use nalgebra::{DMatrix, Matrix3, Point3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Capabilities, FeatureProvider, Frame};
use crate::error::{Error, Result};
use crate::geometry::{KdTree, PatchSet};

/// Slots of the untiled descriptor.
pub const BASE_LEN: usize = 9;
/// Indices of the slots derived from the normal direction.
pub const NORMAL_SLOTS: [usize; 3] = [3, 4, 5];

/// Patch shape descriptor, tiled to `dim`:
/// `[λ0, λ1, λ2, n_x, n_y, n_z, ln(1 + count), mean |h|, max |h|]`
/// with ascending covariance eigenvalues `λ`, the sign-canonical normal `n`
/// (eigenvector of `λ0`) and `h` the point offsets along `n`.
pub fn handcrafted_geometric_descriptor(points: &[Point3<f64>], dim: usize) -> Vec<f64> {
    let base = base_descriptor(points);
    (0..dim).map(|i| base[i % BASE_LEN]).collect()
}

fn base_descriptor(points: &[Point3<f64>]) -> [f64; BASE_LEN] {
    let n = points.len().max(1) as f64;
    let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lambdas = order.map(|i| eig.eigenvalues[i].max(0.0));
    let mut normal: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    let lead = (0..3)
        .max_by(|&a, &b| normal[a].abs().total_cmp(&normal[b].abs()))
        .unwrap_or(0);
    if normal[lead] < 0.0 {
        normal = -normal;
    }
    let offsets: Vec<f64> = points.iter().map(|p| (p.coords - centroid).dot(&normal).abs()).collect();
    let mean_h = offsets.iter().sum::<f64>() / n;
    let max_h = offsets.iter().copied().fold(0.0, f64::max);
    [
        lambdas[0],
        lambdas[1],
        lambdas[2],
        normal.x,
        normal.y,
        normal.z,
        (1.0 + points.len() as f64).ln(),
        mean_h,
        max_h,
    ]
}

fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Patch descriptors plus per-point neighbor-distance signatures.
///
/// A point's signature is the sorted distances to its `neighbors` nearest
/// cloud points, lifted by random Fourier features so that inner products
/// approximate a Gaussian kernel of width `bandwidth` between signatures.
#[derive(Debug, Clone)]
pub struct HandcraftedProvider {
    pub patch_channels: usize,
    pub point_channels: usize,
    pub neighbors: usize,
    pub bandwidth: f64,
    projection: DMatrix<f64>,
}

impl HandcraftedProvider {
    pub fn new(patch_channels: usize, point_channels: usize) -> Self {
        Self::with_params(patch_channels, point_channels, 8, 0.004, 0)
            .expect("default handcrafted parameters are valid")
    }

    pub fn with_params(
        patch_channels: usize,
        point_channels: usize,
        neighbors: usize,
        bandwidth: f64,
        seed: u64,
    ) -> Result<Self> {
        if point_channels < 2 || !point_channels.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("point channels must be even, got {point_channels}")));
        }
        if patch_channels == 0 || neighbors == 0 || !(bandwidth > 0.0) {
            return Err(Error::InvalidArgument("handcrafted descriptor parameters must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = DMatrix::from_fn(point_channels / 2, neighbors, |_, _| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g / bandwidth
        });
        Ok(Self {
            patch_channels,
            point_channels,
            neighbors,
            bandwidth,
            projection,
        })
    }

    pub fn point_signature(&self, tree: &KdTree, p: &Point3<f64>) -> Vec<f64> {
        let hits = tree.knn(p, (self.neighbors + 1).min(tree.len()));
        let mut sig: Vec<f64> = hits.iter().skip(1).map(|h| h.distance).collect();
        let fill = sig.last().copied().unwrap_or(0.0);
        sig.resize(self.neighbors, fill);
        sig
    }
}

impl FeatureProvider for HandcraftedProvider {
    fn name(&self) -> &str {
        "handcrafted"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            patch_channels: Some(self.patch_channels),
            point_channels: Some(self.point_channels),
            ..Default::default()
        }
    }

    /// Unit-normalized descriptor rows.
    fn patch_features(&self, frame: &Frame, patches: &PatchSet) -> Result<DMatrix<f64>> {
        let members = patches.members();
        let mut out = DMatrix::zeros(patches.len(), self.patch_channels);
        for (i, m) in members.iter().enumerate() {
            let pts: Vec<Point3<f64>> = m.iter().map(|&j| frame.cloud.points[j]).collect();
            let mut d = handcrafted_geometric_descriptor(&pts, self.patch_channels);
            l2_normalize(&mut d);
            out.row_mut(i).copy_from_slice(&d);
        }
        Ok(out)
    }

    fn point_features(&self, frame: &Frame, _patches: &PatchSet) -> Result<DMatrix<f64>> {
        let tree = KdTree::new(&frame.cloud.points);
        let half = self.point_channels / 2;
        let norm = 1.0 / (half as f64).sqrt();
        let mut out = DMatrix::zeros(frame.cloud.len(), self.point_channels);
        for (i, p) in frame.cloud.points.iter().enumerate() {
            let sig = nalgebra::DVector::from_vec(self.point_signature(&tree, p));
            let phase = &self.projection * sig;
            for k in 0..half {
                out[(i, k)] = phase[k].cos() * norm;
                out[(i, half + k)] = phase[k].sin() * norm;
            }
        }
        Ok(out)
    }
}
