//! Patch-level fusion of visual and geometric features.
//!
//! Every valid geometric patch gathers a `K × K` window of visual patch
//! features around its mapped grid cell, aggregated by a window convolution.
//! The aggregated visual feature is concatenated with the geometric feature
//! and fused by a two-layer feed-forward network.

use nalgebra::{DMatrix, DVector, Point3};
use serde::{Deserialize, Serialize};

use crate::camera::{GridCell, GridMapping, PixelMapping};
use crate::error::{Error, Result};
use crate::features::PatchFeatureMap;
use crate::nn::{Linear, Mlp};

/// Convolution over a `K × K` window of the visual grid.
///
/// `weights[p * K + q]` multiplies the cell at column offset `p - K/2` and row
/// offset `q - K/2` from the patch's cell. Every tap adds its bias, including
/// taps that fall on zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowConv {
    pub kernel: usize,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl WindowConv {
    pub fn new(kernel: usize, weights: Vec<DMatrix<f64>>, biases: Vec<DVector<f64>>) -> Result<Self> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("window size must be odd, got {kernel}")));
        }
        let taps = kernel * kernel;
        if weights.len() != taps || biases.len() != taps {
            return Err(Error::shape("window taps", taps, weights.len().min(biases.len())));
        }
        let (out, inp) = weights[0].shape();
        if weights.iter().any(|w| w.shape() != (out, inp)) || biases.iter().any(|b| b.len() != out) {
            return Err(Error::shape("window weights", format!("{out}×{inp}"), "inconsistent taps"));
        }
        Ok(Self {
            kernel,
            weights,
            biases,
        })
    }

    /// `W_{p,q} = I / K²`, zero biases.
    pub fn averaging(kernel: usize, channels: usize) -> Result<Self> {
        let taps = kernel * kernel;
        let w = DMatrix::identity(channels, channels) / taps as f64;
        Self::new(kernel, vec![w; taps], vec![DVector::zeros(channels); taps])
    }

    pub fn in_channels(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn out_channels(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn tap(&self, p: usize, q: usize) -> (&DMatrix<f64>, &DVector<f64>) {
        let i = p * self.kernel + q;
        (&self.weights[i], &self.biases[i])
    }
}

/// Aggregated visual feature per cell (one row per entry of `cells`).
pub fn window_aggregate(map: &PatchFeatureMap, cells: &[GridCell], conv: &WindowConv) -> Result<DMatrix<f64>> {
    if conv.in_channels() != map.channels {
        return Err(Error::Config(format!(
            "window conv expects {} channels, feature map has {}",
            conv.in_channels(),
            map.channels
        )));
    }
    if let Some(c) = cells.iter().find(|c| c.u >= map.width || c.v >= map.height) {
        return Err(Error::InvalidArgument(format!(
            "grid cell ({}, {}) outside {}×{} map",
            c.u, c.v, map.width, map.height
        )));
    }
    let n = cells.len();
    let half = (conv.kernel / 2) as i64;
    let mut out = DMatrix::zeros(n, conv.out_channels());
    let mut total_bias = DVector::zeros(conv.out_channels());
    let mut gathered = DMatrix::zeros(n, map.channels);
    for p in 0..conv.kernel {
        for q in 0..conv.kernel {
            let (w, b) = conv.tap(p, q);
            total_bias += b;
            gathered.fill(0.0);
            let mut any = false;
            for (row, c) in cells.iter().enumerate() {
                let u = c.u as i64 + p as i64 - half;
                let v = c.v as i64 + q as i64 - half;
                if u < 0 || v < 0 || u >= map.width as i64 || v >= map.height as i64 {
                    continue;
                }
                any = true;
                for (j, &x) in map.cell(v as usize, u as usize).iter().enumerate() {
                    gathered[(row, j)] = x as f64;
                }
            }
            if any {
                out += &gathered * w.transpose();
            }
        }
    }
    for mut row in out.row_iter_mut() {
        row += total_bias.transpose();
    }
    Ok(out)
}

pub fn reduce_channels(features: &DMatrix<f64>, projection: &Linear) -> Result<DMatrix<f64>> {
    projection.forward(features)
}

/// Feature fusion ablation switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Concatenation followed by the fusion FFN.
    #[default]
    Full,
    /// Visual branch bypassed (zero-filled), linear resize to `D`.
    GeometricOnly,
    /// Geometric branch bypassed (zero-filled), linear resize to `D`.
    VisualOnly,
    /// Concatenation with a linear resize to `D`, no FFN.
    ConcatNoFfn,
}

impl FusionMode {
    pub fn uses_visual(self) -> bool {
        self != FusionMode::GeometricOnly
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionLayers {
    pub window: WindowConv,
    pub reduce_g: Linear,
    pub reduce_v: Linear,
    pub ffn: Mlp,
    pub resize: Linear,
}

impl FusionLayers {
    pub fn validate(&self) -> Result<()> {
        let c = self.reduce_g.out_dim();
        if self.reduce_v.out_dim() != c {
            return Err(Error::shape("reduced visual channels", c, self.reduce_v.out_dim()));
        }
        if self.reduce_v.in_dim() != self.window.out_channels() {
            return Err(Error::shape("reduce_v input", self.window.out_channels(), self.reduce_v.in_dim()));
        }
        if self.ffn.in_dim() != 2 * c || self.resize.in_dim() != 2 * c {
            return Err(Error::shape("fusion input", 2 * c, self.ffn.in_dim()));
        }
        if self.resize.out_dim() != self.ffn.out_dim() {
            return Err(Error::shape("fusion output", self.ffn.out_dim(), self.resize.out_dim()));
        }
        Ok(())
    }

    pub fn fused_dim(&self) -> usize {
        self.ffn.out_dim()
    }

    pub fn reduced_dim(&self) -> usize {
        self.reduce_g.out_dim()
    }
}

/// Fuse reduced geometric and visual features (rows aligned per patch).
pub fn fuse_ffn(
    geometric: &DMatrix<f64>,
    visual: &DMatrix<f64>,
    layers: &FusionLayers,
    mode: FusionMode,
) -> Result<DMatrix<f64>> {
    let c = layers.reduced_dim();
    let n = geometric.nrows();
    if geometric.ncols() != c || visual.ncols() != c || visual.nrows() != n {
        return Err(Error::shape(
            "fusion inputs",
            format!("{n}×{c} twice"),
            format!("{:?} and {:?}", geometric.shape(), visual.shape()),
        ));
    }
    let mut cat = DMatrix::zeros(n, 2 * c);
    if mode != FusionMode::VisualOnly {
        cat.columns_mut(0, c).copy_from(geometric);
    }
    if mode != FusionMode::GeometricOnly {
        cat.columns_mut(c, c).copy_from(visual);
    }
    match mode {
        FusionMode::Full => layers.ffn.forward(&cat),
        _ => layers.resize.forward(&cat),
    }
}

/// Fused features for the valid patches of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPatchSet {
    /// Index into the frame's `PatchSet` for each row.
    pub patch_ids: Vec<usize>,
    pub features: DMatrix<f64>,
    pub visual: DMatrix<f64>,
    pub geometric: DMatrix<f64>,
    pub cells: Vec<GridCell>,
    pub normalized_pixels: Vec<[f64; 2]>,
    pub centers: Vec<Point3<f64>>,
}

impl FusedPatchSet {
    pub fn len(&self) -> usize {
        self.patch_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patch_ids.is_empty()
    }
}

/// Window-aggregate, reduce and fuse all patches with a valid grid cell.
pub fn fuse_patches(
    map: &PatchFeatureMap,
    centers: &[Point3<f64>],
    patch_features: &DMatrix<f64>,
    pixels: &PixelMapping,
    grid: &GridMapping,
    layers: &FusionLayers,
    mode: FusionMode,
) -> Result<FusedPatchSet> {
    if patch_features.nrows() != centers.len() || grid.cells.len() != centers.len() {
        return Err(Error::shape("patch count", centers.len(), patch_features.nrows()));
    }
    let patch_ids = grid.valid_indices();
    if patch_ids.is_empty() {
        return Err(Error::NoValidPatches);
    }
    let cells: Vec<GridCell> = patch_ids.iter().map(|&i| grid.cells[i].expect("valid index")).collect();
    let raw_geom = DMatrix::from_fn(patch_ids.len(), patch_features.ncols(), |r, c| patch_features[(patch_ids[r], c)]);
    let geometric = reduce_channels(&raw_geom, &layers.reduce_g)?;
    let visual = if mode.uses_visual() {
        let win = window_aggregate(map, &cells, &layers.window)?;
        reduce_channels(&win, &layers.reduce_v)?
    } else {
        DMatrix::zeros(patch_ids.len(), layers.reduced_dim())
    };
    let features = fuse_ffn(&geometric, &visual, layers, mode)?;
    if !features.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("fused features".into()));
    }
    Ok(FusedPatchSet {
        normalized_pixels: patch_ids.iter().map(|&i| pixels.normalized(i)).collect(),
        centers: patch_ids.iter().map(|&i| centers[i]).collect(),
        patch_ids,
        features,
        visual,
        geometric,
        cells,
    })
}
