//! Point matching inside matched patch pairs.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax, sinkhorn, PatchMatch};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointSelection {
    /// Entries that are the maximum of both their row and column, slack included.
    Mutual,
    /// The `k` best real columns of every real row.
    TopK(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointMatchConfig {
    /// Points kept per patch; larger patches are subsampled.
    pub cap: usize,
    pub iterations: usize,
    /// Multiplier of feature inner products; `None` means `1 / sqrt(dim)`.
    pub score_scale: Option<f64>,
    pub confidence_threshold: f64,
    pub selection: PointSelection,
    pub seed: u64,
}

impl Default for PointMatchConfig {
    fn default() -> Self {
        Self {
            cap: 64,
            iterations: 100,
            score_scale: None,
            confidence_threshold: 0.05,
            selection: PointSelection::Mutual,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMatch {
    #[serde(rename = "pi")]
    pub p: usize,
    #[serde(rename = "qi")]
    pub q: usize,
    pub conf: f64,
    /// Index of the originating patch match.
    #[serde(skip)]
    pub patch_pair: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCorrespondences {
    /// Sorted by `(p, q)`.
    pub matches: Vec<PointMatch>,
}

impl PointCorrespondences {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

/// Members of `patch`, subsampled to `cap` with a seed that depends only on
/// the base seed and the patch index.
pub fn capped_members(members: &[usize], cap: usize, seed: u64, patch: usize) -> Vec<usize> {
    if members.len() <= cap {
        return members.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (patch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut picked: Vec<usize> = sample(&mut rng, members.len(), cap).into_iter().map(|i| members[i]).collect();
    picked.sort_unstable();
    picked
}

fn select(a: &DMatrix<f64>, selection: PointSelection, threshold: f64) -> Vec<(usize, usize, f64)> {
    let (m, n) = (a.nrows() - 1, a.ncols() - 1);
    let mut out = Vec::new();
    match selection {
        PointSelection::Mutual => {
            let row_best: Vec<usize> = (0..m).map(|i| argmax(a.row(i).iter())).collect();
            let col_best: Vec<usize> = (0..n).map(|j| argmax(a.column(j).iter())).collect();
            for (i, &j) in row_best.iter().enumerate() {
                if j < n && col_best[j] == i && a[(i, j)] >= threshold {
                    out.push((i, j, a[(i, j)]));
                }
            }
        }
        PointSelection::TopK(k) => {
            for i in 0..m {
                let mut cols: Vec<usize> = (0..n).collect();
                cols.sort_by(|&x, &y| a[(i, y)].total_cmp(&a[(i, x)]).then(x.cmp(&y)));
                for &j in cols.iter().take(k) {
                    if a[(i, j)] >= threshold {
                        out.push((i, j, a[(i, j)]));
                    }
                }
            }
        }
    }
    out
}

/// Fine matches for every patch match. `members_*[i]` lists the point indices of
/// patch `i`; features have one row per point.
pub fn match_points(
    patch_matches: &[PatchMatch],
    members_p: &[Vec<usize>],
    members_q: &[Vec<usize>],
    feats_p: &DMatrix<f64>,
    feats_q: &DMatrix<f64>,
    dustbin: f64,
    cfg: &PointMatchConfig,
) -> Result<PointCorrespondences> {
    if feats_p.ncols() != feats_q.ncols() {
        return Err(Error::shape("point feature dim", feats_p.ncols(), feats_q.ncols()));
    }
    if cfg.cap == 0 {
        return Err(Error::Config("point cap must be at least 1".into()));
    }
    let scale = cfg.score_scale.unwrap_or(1.0 / (feats_p.ncols().max(1) as f64).sqrt());
    let per_pair: Vec<Vec<PointMatch>> = patch_matches
        .par_iter()
        .enumerate()
        .map(|(pair, pm)| -> Result<Vec<PointMatch>> {
            let (Some(mp), Some(mq)) = (members_p.get(pm.p), members_q.get(pm.q)) else {
                return Err(Error::InvalidArgument(format!("patch match ({}, {}) out of range", pm.p, pm.q)));
            };
            let a_idx = capped_members(mp, cfg.cap, cfg.seed, pm.p);
            let b_idx = capped_members(mq, cfg.cap, cfg.seed, pm.q);
            if a_idx.is_empty() || b_idx.is_empty() {
                return Ok(Vec::new());
            }
            let s = DMatrix::from_fn(a_idx.len(), b_idx.len(), |i, j| {
                scale * feats_p.row(a_idx[i]).dot(&feats_q.row(b_idx[j]))
            });
            let a = sinkhorn(&s, cfg.iterations, Some(dustbin))?;
            Ok(select(&a, cfg.selection, cfg.confidence_threshold)
                .into_iter()
                .map(|(i, j, conf)| PointMatch {
                    p: a_idx[i],
                    q: b_idx[j],
                    conf: conf.min(1.0),
                    patch_pair: pair,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut matches: Vec<PointMatch> = per_pair.into_iter().flatten().collect();
    matches.sort_by(|x, y| x.p.cmp(&y.p).then(x.q.cmp(&y.q)).then(x.patch_pair.cmp(&y.patch_pair)));
    Ok(PointCorrespondences { matches })
}
