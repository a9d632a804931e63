//! Multi-head self- and cross-attention with optional positional terms.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::rotary::rotate_rows;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Plain scaled dot-product.
    None,
    /// Query–key plus query–embedding term.
    Geo,
    /// Both terms rotated by pixel-position angles.
    #[default]
    Mixed,
}

/// Positional quantities of one frame, shared by every self-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEncoding {
    pub len: usize,
    /// `r̂_ij` at row `i·n + j`.
    pub r_hat: Option<DMatrix<f64>>,
    pub p: Option<DMatrix<f64>>,
    pub p_prime: Option<DMatrix<f64>>,
    /// `R(p'_j) r̂_ij` at row `i·n + j`.
    r_rotated: Option<DMatrix<f64>>,
}

impl FrameEncoding {
    pub fn none(len: usize) -> Self {
        Self {
            len,
            r_hat: None,
            p: None,
            p_prime: None,
            r_rotated: None,
        }
    }

    pub fn geo(len: usize, r_hat: DMatrix<f64>) -> Result<Self> {
        if r_hat.nrows() != len * len {
            return Err(Error::shape("pair embeddings", len * len, r_hat.nrows()));
        }
        Ok(Self {
            r_hat: Some(r_hat),
            ..Self::none(len)
        })
    }

    pub fn mixed(len: usize, r_hat: DMatrix<f64>, p: DMatrix<f64>, p_prime: DMatrix<f64>) -> Result<Self> {
        let base = Self::geo(len, r_hat)?;
        let r_hat = base.r_hat.as_ref().expect("set by geo");
        if p.nrows() != len || p_prime.shape() != p.shape() {
            return Err(Error::shape("rotary angles", len, p.nrows()));
        }
        let mut per_pair = DMatrix::zeros(len * len, p_prime.ncols());
        for i in 0..len {
            per_pair.rows_mut(i * len, len).copy_from(&p_prime);
        }
        let r_rotated = rotate_rows(&per_pair, r_hat)?;
        Ok(Self {
            p: Some(p),
            p_prime: Some(p_prime),
            r_rotated: Some(r_rotated),
            ..base
        })
    }

    fn require(&self, mode: AttentionMode) -> Result<()> {
        let ok = match mode {
            AttentionMode::None => true,
            AttentionMode::Geo => self.r_hat.is_some(),
            AttentionMode::Mixed => self.r_rotated.is_some() && self.p.is_some(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("frame encoding lacks terms for {mode:?} attention")))
        }
    }
}

/// `Σ_t q_i[t] · e_{i,j}[t]` over the columns of one head.
fn embedding_term(q: &DMatrix<f64>, e: &DMatrix<f64>, n: usize, cols: std::ops::Range<usize>, out: &mut DMatrix<f64>) {
    let (c0, w) = (cols.start, cols.len());
    for i in 0..q.nrows() {
        let qi = q.view((i, c0), (1, w)).transpose();
        let term = e.view((i * n, c0), (n, w)) * qi;
        let mut row = out.row_mut(i);
        row += term.transpose();
    }
}

/// Pre-softmax scores per head from projected queries and keys.
pub fn scores_from_projections(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    heads: usize,
    mode: AttentionMode,
    enc: Option<&FrameEncoding>,
) -> Result<Vec<DMatrix<f64>>> {
    let d = q.ncols();
    if k.ncols() != d || heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::shape("attention heads", d, k.ncols()));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let enc = match mode {
        AttentionMode::None => None,
        _ => {
            let e = enc.ok_or_else(|| Error::InvalidArgument("positional attention needs a frame encoding".into()))?;
            e.require(mode)?;
            if e.len != q.nrows() || e.len != k.nrows() {
                return Err(Error::shape("frame encoding", q.nrows(), e.len));
            }
            Some(e)
        }
    };
    let (qk_q, qk_k, qe_q) = match (mode, enc) {
        (AttentionMode::Mixed, Some(e)) => {
            let p = e.p.as_ref().expect("checked");
            let pp = e.p_prime.as_ref().expect("checked");
            (rotate_rows(p, q)?, rotate_rows(p, k)?, Some(rotate_rows(pp, q)?))
        }
        (AttentionMode::Geo, _) => (q.clone(), k.clone(), Some(q.clone())),
        _ => (q.clone(), k.clone(), None),
    };
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut s = qk_q.columns(h * dh, dh) * qk_k.columns(h * dh, dh).transpose();
        if let (Some(qe), Some(e)) = (&qe_q, enc) {
            let emb = match mode {
                AttentionMode::Mixed => e.r_rotated.as_ref(),
                _ => e.r_hat.as_ref(),
            }
            .expect("checked");
            embedding_term(qe, emb, k.nrows(), cols, &mut s);
        }
        s *= scale;
        out.push(s);
    }
    Ok(out)
}

pub fn softmax_rows(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = s.clone();
    for mut row in out.row_iter_mut() {
        let m = row.max();
        row.apply(|v| *v = (*v - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

/// One attention sublayer followed by a feed-forward sublayer, both pre-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ffn: Mlp,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub heads: usize,
}

impl AttentionLayer {
    pub fn dim(&self) -> usize {
        self.wq.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (name, l) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            if l.in_dim() != d || l.out_dim() != d {
                return Err(Error::shape(format!("attention {name}"), format!("{d}×{d}"), format!("{:?}", l.weight.shape())));
            }
        }
        if self.ffn.in_dim() != d || self.ffn.out_dim() != d || self.norm1.dim() != d || self.norm2.dim() != d {
            return Err(Error::shape("attention feed-forward", d, self.ffn.in_dim()));
        }
        if self.heads == 0 || !d.is_multiple_of(2 * self.heads) {
            return Err(Error::Config(format!("model dim {d} not divisible by 2 × {} heads", self.heads)));
        }
        Ok(())
    }

    /// Self-attention scores (pre-softmax, per head) for features `f`.
    pub fn attention_scores(&self, f: &DMatrix<f64>, mode: AttentionMode, enc: Option<&FrameEncoding>) -> Result<Vec<DMatrix<f64>>> {
        let x = self.norm1.forward(f)?;
        scores_from_projections(&self.wq.forward(&x)?, &self.wk.forward(&x)?, self.heads, mode, enc)
    }

    pub fn self_attention(
        &self,
        f: &DMatrix<f64>,
        mode: AttentionMode,
        enc: Option<&FrameEncoding>,
        layer: usize,
    ) -> Result<DMatrix<f64>> {
        check_finite(f, layer)?;
        let x = self.norm1.forward(f)?;
        let q = self.wq.forward(&x)?;
        let k = self.wk.forward(&x)?;
        let v = self.wv.forward(&x)?;
        let scores = scores_from_projections(&q, &k, self.heads, mode, enc)?;
        self.finish(f, scores, &v, layer)
    }

    /// Queries from `source`, keys and values from `target`; no positional terms.
    pub fn cross_attention(&self, source: &DMatrix<f64>, target: &DMatrix<f64>, layer: usize) -> Result<DMatrix<f64>> {
        check_finite(source, layer)?;
        check_finite(target, layer)?;
        let xs = self.norm1.forward(source)?;
        let xt = self.norm1.forward(target)?;
        let q = self.wq.forward(&xs)?;
        let k = self.wk.forward(&xt)?;
        let v = self.wv.forward(&xt)?;
        let scores = scores_from_projections(&q, &k, self.heads, AttentionMode::None, None)?;
        self.finish(source, scores, &v, layer)
    }

    fn finish(&self, residual: &DMatrix<f64>, scores: Vec<DMatrix<f64>>, v: &DMatrix<f64>, layer: usize) -> Result<DMatrix<f64>> {
        let dh = self.dim() / self.heads;
        let mut heads_out = DMatrix::zeros(residual.nrows(), self.dim());
        for (h, s) in scores.iter().enumerate() {
            if s.iter().any(|x| x.is_nan()) {
                return Err(Error::NumericalFailure { layer });
            }
            let a = softmax_rows(s);
            heads_out.columns_mut(h * dh, dh).copy_from(&(a * v.columns(h * dh, dh)));
        }
        let y = residual + self.wo.forward(&heads_out)?;
        let z = &y + self.ffn.forward(&self.norm2.forward(&y)?)?;
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericalFailure { layer });
        }
        Ok(z)
    }
}

fn check_finite(f: &DMatrix<f64>, layer: usize) -> Result<()> {
    if f.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalFailure { layer })
    }
}
