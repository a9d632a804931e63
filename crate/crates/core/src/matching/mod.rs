//! Coarse patch matching and fine point matching.

pub mod points;
pub mod sinkhorn;

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use points::{match_points, PointCorrespondences, PointMatch, PointMatchConfig, PointSelection};
pub use sinkhorn::sinkhorn;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchMatch {
    #[serde(rename = "Pi")]
    pub p: usize,
    #[serde(rename = "Qi")]
    pub q: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchMatchConfig {
    pub top_k: usize,
    pub mutual: bool,
    /// Inner products of unit features are multiplied by this before the dual softmax.
    pub similarity_scale: f64,
}

impl Default for PatchMatchConfig {
    fn default() -> Self {
        Self {
            top_k: 256,
            mutual: false,
            similarity_scale: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchCorrespondences {
    /// Descending score, ties broken by `(p, q)`.
    pub matches: Vec<PatchMatch>,
    pub top_k: usize,
    pub mutual: bool,
}

fn l2_rows(f: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = f.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Index of the first maximum.
pub(crate) fn argmax<'a>(it: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Elementwise product of the row-softmax and column-softmax of `s`.
pub fn dual_softmax(s: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = s.shape();
    let row_max: Vec<f64> = (0..m).map(|i| s.row(i).max()).collect();
    let col_max: Vec<f64> = (0..n).map(|j| s.column(j).max()).collect();
    let row_z: Vec<f64> = (0..m).map(|i| s.row(i).iter().map(|v| (v - row_max[i]).exp()).sum()).collect();
    let col_z: Vec<f64> = (0..n).map(|j| s.column(j).iter().map(|v| (v - col_max[j]).exp()).sum()).collect();
    DMatrix::from_fn(m, n, |i, j| {
        let v = s[(i, j)];
        (v - row_max[i]).exp() / row_z[i] * ((v - col_max[j]).exp() / col_z[j])
    })
}

pub fn match_patches(fp: &DMatrix<f64>, fq: &DMatrix<f64>, cfg: &PatchMatchConfig) -> Result<PatchCorrespondences> {
    if fp.nrows() == 0 || fq.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    if fp.ncols() != fq.ncols() {
        return Err(Error::shape("patch feature dim", fp.ncols(), fq.ncols()));
    }
    if cfg.top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    let (m, n) = (fp.nrows(), fq.nrows());
    let s = (l2_rows(fp) * l2_rows(fq).transpose()) * cfg.similarity_scale;
    let score = dual_softmax(&s);
    if score.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("patch matching scores".into()));
    }
    let k = if cfg.top_k > m * n {
        log::warn!("top_k {} exceeds {} candidate pairs, clamping", cfg.top_k, m * n);
        m * n
    } else {
        cfg.top_k
    };
    let mut all: Vec<PatchMatch> = (0..m)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(p, q)| PatchMatch {
            p,
            q,
            score: score[(p, q)],
        })
        .collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.p.cmp(&b.p)).then(a.q.cmp(&b.q)));
    all.truncate(k);
    if cfg.mutual {
        let row_best: Vec<usize> = (0..m).map(|i| argmax(score.row(i).iter())).collect();
        let col_best: Vec<usize> = (0..n).map(|j| argmax(score.column(j).iter())).collect();
        all.retain(|c| row_best[c.p] == c.q && col_best[c.q] == c.p);
    }
    Ok(PatchCorrespondences {
        matches: all,
        top_k: k,
        mutual: cfg.mutual,
    })
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
