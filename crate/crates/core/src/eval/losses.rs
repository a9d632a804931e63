//! Forward values of the patch circle loss and the point NLL loss.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CircleLossConfig {
    pub pos_margin: f64,
    pub neg_margin: f64,
    pub scale: f64,
    /// Overlap above which a patch pair is positive; pairs with zero overlap are negative.
    pub pos_overlap: f64,
}

impl Default for CircleLossConfig {
    fn default() -> Self {
        Self {
            pos_margin: 0.1,
            neg_margin: 1.4,
            scale: 24.0,
            pos_overlap: 0.1,
        }
    }
}

/// Row-anchored loss over feature distances `dist` and overlaps `overlap`:
/// `log(1 + Σ_pos λ e^{γ β_p (d − Δp)} · Σ_neg e^{γ β_n (Δn − d)})` with
/// `β_p = max(0, d − Δp)`, `β_n = max(0, Δn − d)`, averaged over anchors with
/// at least one positive.
pub fn circle_loss(dist: &DMatrix<f64>, overlap: &DMatrix<f64>, cfg: &CircleLossConfig) -> Result<f64> {
    if dist.shape() != overlap.shape() {
        return Err(Error::shape(
            "circle loss inputs",
            format!("{:?}", dist.shape()),
            format!("{:?}", overlap.shape()),
        ));
    }
    let mut total = 0.0;
    let mut anchors = 0usize;
    for i in 0..dist.nrows() {
        let mut pos = 0.0;
        let mut neg = 0.0;
        let mut has_pos = false;
        for j in 0..dist.ncols() {
            let d = dist[(i, j)];
            let lambda = overlap[(i, j)];
            if lambda > cfg.pos_overlap {
                has_pos = true;
                let beta = (d - cfg.pos_margin).max(0.0);
                pos += lambda.min(1.0) * (cfg.scale * beta * (d - cfg.pos_margin)).exp();
            } else if lambda == 0.0 {
                let beta = (cfg.neg_margin - d).max(0.0);
                neg += (cfg.scale * beta * (cfg.neg_margin - d)).exp();
            }
        }
        if has_pos {
            total += (pos * neg).ln_1p();
            anchors += 1;
        }
    }
    Ok(if anchors == 0 { 0.0 } else { total / anchors as f64 })
}

fn unit_rows(f: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = f.clone();
    for mut r in out.row_iter_mut() {
        let n = r.norm();
        if n > 0.0 {
            r /= n;
        }
    }
    out
}

/// Mean of the P-anchored and Q-anchored circle losses on unit-normalized features.
pub fn overlap_circle_loss(fp: &DMatrix<f64>, fq: &DMatrix<f64>, overlap: &DMatrix<f64>, cfg: &CircleLossConfig) -> Result<f64> {
    if fp.ncols() != fq.ncols() {
        return Err(Error::shape("circle loss feature dim", fp.ncols(), fq.ncols()));
    }
    let (a, b) = (unit_rows(fp), unit_rows(fq));
    let dist = DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| (a.row(i) - b.row(j)).norm());
    let rows = circle_loss(&dist, overlap, cfg)?;
    let cols = circle_loss(&dist.transpose(), &overlap.transpose(), cfg)?;
    Ok((rows + cols) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllOutcome {
    pub loss: f64,
    /// Some supervised cell had mass below the floor.
    pub clamped: bool,
}

/// `−mean log a` over ground-truth cells and the slack cells of unmatched rows and columns.
pub fn point_nll_loss(assignment: &DMatrix<f64>, gt: &[(usize, usize)], floor: f64) -> Result<NllOutcome> {
    let (rows, cols) = assignment.shape();
    if rows < 2 || cols < 2 {
        return Err(Error::InvalidArgument("assignment must include a slack row and column".into()));
    }
    let (m, n) = (rows - 1, cols - 1);
    let mut row_hit = vec![false; m];
    let mut col_hit = vec![false; n];
    let mut cells = Vec::with_capacity(gt.len() + m + n);
    for &(i, j) in gt {
        if i >= m || j >= n {
            return Err(Error::InvalidArgument(format!("gt match ({i}, {j}) outside {m}×{n}")));
        }
        row_hit[i] = true;
        col_hit[j] = true;
        cells.push((i, j));
    }
    cells.extend((0..m).filter(|&i| !row_hit[i]).map(|i| (i, n)));
    cells.extend((0..n).filter(|&j| !col_hit[j]).map(|j| (m, j)));
    let mut clamped = false;
    let sum: f64 = cells
        .iter()
        .map(|&c| {
            let a = assignment[c];
            if a < floor {
                clamped = true;
            }
            -a.max(floor).ln()
        })
        .sum();
    Ok(NllOutcome {
        loss: sum / cells.len() as f64,
        clamped,
    })
}
