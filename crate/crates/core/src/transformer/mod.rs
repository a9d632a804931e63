//! Visual-geometric transformer: interlaced self- and cross-attention over
//! fused patch features.

pub mod attention;
pub mod embedding;
pub mod rotary;

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, Point3};

use crate::error::{Error, Result};
use crate::fusion::FusedPatchSet;
use crate::nn::Linear;

pub use attention::{scores_from_projections, softmax_rows, AttentionLayer, AttentionMode, FrameEncoding};
pub use embedding::{shared_project, sinusoidal, GeometricEmbedding};
pub use rotary::{rotary_apply, PositionalEncoder};

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub self_attn: AttentionLayer,
    pub cross_attn: AttentionLayer,
}

/// Evaluation counts of the cached positional quantities.
#[derive(Debug, Default)]
pub struct CacheCounters {
    pair_embeddings: AtomicUsize,
    position_angles: AtomicUsize,
}

impl CacheCounters {
    /// Number of `r̂_ij` pairs computed so far.
    pub fn pair_embeddings(&self) -> usize {
        self.pair_embeddings.load(Ordering::Relaxed)
    }

    /// Number of patches whose `(p, p')` were computed so far.
    pub fn position_angles(&self) -> usize {
        self.position_angles.load(Ordering::Relaxed)
    }
}

#[derive(Debug)]
pub struct VisualGeometricTransformer {
    pub input_proj: Linear,
    pub geometric: GeometricEmbedding,
    pub wr: DMatrix<f64>,
    pub slope: f64,
    pub positional: PositionalEncoder,
    pub layers: Vec<TransformerLayer>,
    pub mode: AttentionMode,
    pub counters: CacheCounters,
}

impl VisualGeometricTransformer {
    pub fn dim(&self) -> usize {
        self.input_proj.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        self.geometric.validate()?;
        if self.geometric.dim() != d || self.wr.shape() != (d, d) {
            return Err(Error::shape("geometric embedding dim", d, self.geometric.dim()));
        }
        self.positional.validate(d)?;
        for l in &self.layers {
            for a in [&l.self_attn, &l.cross_attn] {
                a.validate()?;
                if a.dim() != d {
                    return Err(Error::shape("attention layer dim", d, a.dim()));
                }
            }
        }
        Ok(())
    }

    /// Positional terms of one frame, computed once and reused by every layer.
    pub fn encode_frame(&self, centers: &[Point3<f64>], normalized_pixels: &[[f64; 2]]) -> Result<FrameEncoding> {
        let n = centers.len();
        if normalized_pixels.len() != n {
            return Err(Error::shape("patch pixel positions", n, normalized_pixels.len()));
        }
        if self.mode == AttentionMode::None {
            return Ok(FrameEncoding::none(n));
        }
        let r_hat = self.geometric.projected_pairs(centers, &self.wr, self.slope)?;
        self.counters.pair_embeddings.fetch_add(n * n, Ordering::Relaxed);
        if self.mode == AttentionMode::Geo {
            return FrameEncoding::geo(n, r_hat);
        }
        let (p, p_prime) = self.positional.angles(normalized_pixels)?;
        self.counters.position_angles.fetch_add(n, Ordering::Relaxed);
        FrameEncoding::mixed(n, r_hat, p, p_prime)
    }

    /// `L × [self(P), self(Q), cross(P←Q) ∥ cross(Q←P)]` on `d`-dim features.
    pub fn run_stack(
        &self,
        fp: &DMatrix<f64>,
        fq: &DMatrix<f64>,
        enc_p: &FrameEncoding,
        enc_q: &FrameEncoding,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if fp.nrows() == 0 || fq.nrows() == 0 {
            return Err(Error::EmptyInput);
        }
        let mut p = fp.clone();
        let mut q = fq.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            p = layer.self_attn.self_attention(&p, self.mode, Some(enc_p), l)?;
            q = layer.self_attn.self_attention(&q, self.mode, Some(enc_q), l)?;
            let p_next = layer.cross_attn.cross_attention(&p, &q, l)?;
            let q_next = layer.cross_attn.cross_attention(&q, &p, l)?;
            p = p_next;
            q = q_next;
        }
        Ok((p, q))
    }

    /// Project fused features to the model dimension and refine both frames.
    pub fn forward(&self, p: &FusedPatchSet, q: &FusedPatchSet) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let fp = self.input_proj.forward(&p.features)?;
        let fq = self.input_proj.forward(&q.features)?;
        let enc_p = self.encode_frame(&p.centers, &p.normalized_pixels)?;
        let enc_q = self.encode_frame(&q.centers, &q.normalized_pixels)?;
        self.run_stack(&fp, &fq, &enc_p, &enc_q)
    }
}
