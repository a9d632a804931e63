//! Pairwise geometric structure embedding between patch centers.

use nalgebra::{DMatrix, Point3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::KdTree;
use crate::nn::{leaky_relu, Linear};

/// `ω_k = 10000^(-2k/dim)` for each output slot pair; odd `dim` gets one extra sine.
pub fn frequencies(dim: usize) -> Vec<f64> {
    (0..dim.div_ceil(2))
        .map(|k| 10000f64.powf(-2.0 * k as f64 / dim as f64))
        .collect()
}

/// [`sinusoidal_into`] with frequencies from [`frequencies`].
pub fn sinusoidal_with(freqs: &[f64], x: f64, out: &mut [f64]) {
    let dim = out.len();
    for k in 0..dim / 2 {
        let (s, c) = (x * freqs[k]).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
    if dim % 2 == 1 {
        out[dim - 1] = (x * freqs[dim / 2]).sin();
    }
}

/// Alternating `[sin(x ω_0), cos(x ω_0), sin(x ω_1), …]`, `ω_k = 10000^(-2k/dim)`.
pub fn sinusoidal_into(x: f64, out: &mut [f64]) {
    sinusoidal_with(&frequencies(out.len()), x, out);
}

pub fn sinusoidal(x: f64, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    sinusoidal_into(x, &mut out);
    out
}

/// Angle in radians between `(c_m - c_i)` and `(c_j - c_i)`; zero when either vanishes.
pub fn neighbor_angle(ci: &Point3<f64>, cm: &Point3<f64>, cj: &Point3<f64>) -> f64 {
    let a = cm - ci;
    let b = cj - ci;
    if a.norm_squared() == 0.0 || b.norm_squared() == 0.0 {
        return 0.0;
    }
    a.cross(&b).norm().atan2(a.dot(&b))
}

/// `r_ij = dist_proj(sin(d_ij / σ_d)) + angle_proj(max_m sin(θ_ijm / σ_a))`
/// where `θ_ijm` runs over the `angle_k` nearest neighbors `m` of patch `i`.
/// `sigma_a` is in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricEmbedding {
    pub dist_proj: Linear,
    pub angle_proj: Linear,
    pub sigma_d: f64,
    pub sigma_a: f64,
    pub angle_k: usize,
}

impl GeometricEmbedding {
    pub fn dim(&self) -> usize {
        self.dist_proj.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.dist_proj.in_dim() != d || self.angle_proj.in_dim() != d || self.angle_proj.out_dim() != d {
            return Err(Error::shape(
                "geometric embedding projections",
                format!("{d}×{d}"),
                format!("{:?} / {:?}", self.dist_proj.weight.shape(), self.angle_proj.weight.shape()),
            ));
        }
        if !(self.sigma_d > 0.0 && self.sigma_a > 0.0) {
            return Err(Error::Config("embedding scales must be positive".into()));
        }
        Ok(())
    }

    /// Neighbor lists used by the angular term, `k_a` clamped to `n - 1`.
    /// A single patch has no angular neighbors and a zero angular term.
    pub fn angle_neighbors(&self, centers: &[Point3<f64>]) -> Result<Vec<Vec<usize>>> {
        if centers.is_empty() {
            return Err(Error::EmptyInput);
        }
        let k = self.angle_k.min(centers.len() - 1);
        if k < self.angle_k {
            log::warn!("angular neighbor count reduced from {} to {k}", self.angle_k);
        }
        let tree = KdTree::new(centers);
        Ok(centers
            .iter()
            .enumerate()
            .map(|(i, c)| {
                tree.knn(c, k + 1)
                    .into_iter()
                    .map(|n| n.index)
                    .filter(|&m| m != i)
                    .take(k)
                    .collect()
            })
            .collect())
    }

    /// Raw `r_ij` for a fixed `i`, one row per `j`.
    pub fn row_block(&self, centers: &[Point3<f64>], neighbors: &[usize], i: usize) -> Result<DMatrix<f64>> {
        let n = centers.len();
        let d = self.dim();
        let mut dist = DMatrix::zeros(n, d);
        let mut ang = DMatrix::from_element(n, d, f64::NEG_INFINITY);
        let freqs = frequencies(d);
        let mut buf = vec![0.0; d];
        let ci = &centers[i];
        for (j, cj) in centers.iter().enumerate() {
            sinusoidal_with(&freqs, (cj - ci).norm() / self.sigma_d, &mut buf);
            dist.row_mut(j).copy_from_slice(&buf);
            for &m in neighbors {
                let deg = neighbor_angle(ci, &centers[m], cj).to_degrees();
                sinusoidal_with(&freqs, deg / self.sigma_a, &mut buf);
                for (t, &v) in buf.iter().enumerate() {
                    if v > ang[(j, t)] {
                        ang[(j, t)] = v;
                    }
                }
            }
        }
        if neighbors.is_empty() {
            ang.fill(0.0);
        }
        Ok(self.dist_proj.forward(&dist)? + self.angle_proj.forward(&ang)?)
    }

    /// All raw `r_ij`, row `i·n + j`.
    pub fn pair_embeddings(&self, centers: &[Point3<f64>]) -> Result<DMatrix<f64>> {
        let n = centers.len();
        let nbrs = self.angle_neighbors(centers)?;
        let mut out = DMatrix::zeros(n * n, self.dim());
        for (i, nb) in nbrs.iter().enumerate() {
            let block = self.row_block(centers, nb, i)?;
            out.rows_mut(i * n, n).copy_from(&block);
        }
        Ok(out)
    }

    /// `r̂_ij = W^R φ(r_ij)` for all pairs, computed row block by row block.
    pub fn projected_pairs(&self, centers: &[Point3<f64>], wr: &DMatrix<f64>, slope: f64) -> Result<DMatrix<f64>> {
        let n = centers.len();
        let nbrs = self.angle_neighbors(centers)?;
        let blocks: Vec<DMatrix<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let r = self.row_block(centers, &nbrs[i], i)?;
                shared_project(&r, wr, slope)
            })
            .collect::<Result<_>>()?;
        let mut out = DMatrix::zeros(n * n, wr.nrows());
        for (i, b) in blocks.iter().enumerate() {
            out.rows_mut(i * n, n).copy_from(b);
        }
        Ok(out)
    }
}

/// Row-wise `W^R φ(r)`.
pub fn shared_project(r: &DMatrix<f64>, wr: &DMatrix<f64>, slope: f64) -> Result<DMatrix<f64>> {
    if r.ncols() != wr.ncols() {
        return Err(Error::shape("shared projection input", wr.ncols(), r.ncols()));
    }
    let act = r.map(|v| leaky_relu(v, slope));
    Ok(act * wr.transpose())
}
