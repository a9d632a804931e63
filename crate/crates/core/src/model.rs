//! Named tensors of the fusion module and transformer, their seeded
//! initialization, and assembly into runnable layers.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{Architecture, PipelineConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionLayers, WindowConv};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::transformer::{
    AttentionLayer, CacheCounters, GeometricEmbedding, PositionalEncoder, TransformerLayer, VisualGeometricTransformer,
};
use crate::weights::{Tensor, WeightStore};

pub const DUSTBIN: &str = "matching.dustbin";

/// Output scale of residual branches in identity-reduction mode.
pub const RESIDUAL_GAIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Every weight drawn from `N(0, 1/fan_in)`, zero biases.
    Random,
    /// Fusion path reproduces its inputs (averaging window, identity
    /// reductions, an FFN that computes the identity through the leaky
    /// rectifier); attention is random with damped residual branches.
    IdentityReduction,
}

fn linear_specs(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, o: usize, i: usize) {
    out.push((format!("{prefix}.weight"), vec![o, i]));
    out.push((format!("{prefix}.bias"), vec![o]));
}

/// Every tensor the architecture reads, with its shape.
pub fn tensor_specs(arch: &Architecture) -> Vec<(String, Vec<usize>)> {
    let a = arch;
    let c2 = 2 * a.reduced_channels;
    let d = a.model_dim;
    let mut s = Vec::new();
    for p in 0..a.window {
        for q in 0..a.window {
            s.push((format!("fusion.window.weight[{p}][{q}]"), vec![a.visual_channels, a.visual_channels]));
            s.push((format!("fusion.window.bias[{p}][{q}]"), vec![a.visual_channels]));
        }
    }
    linear_specs(&mut s, "fusion.reduce_g", a.reduced_channels, a.geometric_channels);
    linear_specs(&mut s, "fusion.reduce_v", a.reduced_channels, a.visual_channels);
    linear_specs(&mut s, "fusion.ffn.layer1", a.fusion_hidden, c2);
    linear_specs(&mut s, "fusion.ffn.layer2", a.fused_dim, a.fusion_hidden);
    linear_specs(&mut s, "fusion.resize", a.fused_dim, c2);
    linear_specs(&mut s, "vgt.input_proj", d, a.fused_dim);
    linear_specs(&mut s, "vgt.geo.dist_proj", d, d);
    linear_specs(&mut s, "vgt.geo.angle_proj", d, d);
    s.push(("vgt.shared.wr".into(), vec![d, d]));
    for m in ["mlp_p", "mlp_pprime"] {
        linear_specs(&mut s, &format!("vgt.pos.{m}.layer1"), a.positional_hidden, 2);
        linear_specs(&mut s, &format!("vgt.pos.{m}.layer2"), d / 2, a.positional_hidden);
    }
    for l in 0..a.layers {
        for kind in ["self", "cross"] {
            let p = format!("vgt.layer{l}.{kind}");
            for w in ["wq", "wk", "wv", "wo"] {
                linear_specs(&mut s, &format!("{p}.{w}"), d, d);
            }
            linear_specs(&mut s, &format!("{p}.ffn1"), a.attention_hidden, d);
            linear_specs(&mut s, &format!("{p}.ffn2"), d, a.attention_hidden);
            for n in ["norm1", "norm2"] {
                s.push((format!("{p}.{n}.weight"), vec![d]));
                s.push((format!("{p}.{n}.bias"), vec![d]));
            }
        }
    }
    s.push((DUSTBIN.into(), vec![1]));
    s
}

fn eye(rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; rows * cols];
    for i in 0..rows.min(cols) {
        v[i * cols + i] = scale;
    }
    v
}

/// Deterministic value for one named tensor in identity-reduction mode, or
/// `None` to fall back to the random draw.
fn identity_value(name: &str, shape: &[usize], arch: &Architecture) -> Result<Option<Vec<f64>>> {
    let c2 = 2 * arch.reduced_channels;
    let zero = || vec![0.0; shape.iter().product()];
    let v = if name.ends_with(".bias") && (name.starts_with("fusion.") || name.starts_with("vgt.input_proj")) {
        zero()
    } else if name.starts_with("fusion.window.weight") {
        eye(shape[0], shape[1], 1.0 / (arch.window * arch.window) as f64)
    } else if matches!(
        name,
        "fusion.reduce_g.weight" | "fusion.reduce_v.weight" | "fusion.resize.weight"
    ) {
        eye(shape[0], shape[1], 1.0)
    } else if name == "fusion.ffn.layer1.weight" || name == "fusion.ffn.layer2.weight" {
        if arch.fusion_hidden != 2 * c2 || arch.fused_dim != c2 {
            return Err(Error::Config(format!(
                "identity reduction needs fusion FFN {c2} → {} → {c2}, got {c2} → {} → {}",
                2 * c2,
                arch.fusion_hidden,
                arch.fused_dim
            )));
        }
        // x = (φ(x) − φ(−x)) / (1 + slope)
        let (rows, cols) = (shape[0], shape[1]);
        let mut w = vec![0.0; rows * cols];
        let s = 1.0 / (1.0 + arch.slope);
        for i in 0..c2 {
            if name.contains("layer1") {
                w[i * cols + i] = 1.0;
                w[(c2 + i) * cols + i] = -1.0;
            } else {
                w[i * cols + i] = s;
                w[i * cols + c2 + i] = -s;
            }
        }
        w
    } else if name == "vgt.input_proj.weight" {
        // fold D inputs onto d outputs
        let (rows, cols) = (shape[0], shape[1]);
        let mut w = vec![0.0; rows * cols];
        for j in 0..cols {
            w[(j % rows) * cols + j] = 1.0;
        }
        w
    } else {
        return Ok(None);
    };
    Ok(Some(v))
}

/// Seeded weights for `arch`.
pub fn init_weights(arch: &Architecture, mode: InitMode, seed: u64) -> Result<WeightStore> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for (name, shape) in tensor_specs(arch) {
        let n: usize = shape.iter().product();
        let values = if name == DUSTBIN {
            vec![1.0]
        } else if name.contains(".norm") {
            let on = name.ends_with(".weight");
            vec![if on { 1.0 } else { 0.0 }; n]
        } else if name.ends_with(".bias") && mode == InitMode::Random {
            vec![0.0; n]
        } else {
            let fixed = match mode {
                InitMode::Random => None,
                InitMode::IdentityReduction => identity_value(&name, &shape, arch)?,
            };
            match fixed {
                Some(v) => v,
                None if name.ends_with(".bias") => vec![0.0; n],
                None => {
                    let fan_in = *shape.last().unwrap_or(&1) as f64;
                    let damped = mode == InitMode::IdentityReduction
                        && (name.ends_with(".wo.weight") || name.ends_with(".ffn2.weight"));
                    let gain = if damped { RESIDUAL_GAIN } else { 1.0 };
                    let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("positive std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
            }
        };
        let data = values.into_iter().map(|v| v as f32).collect();
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

/// Checks that every tensor the architecture needs is present with its shape.
pub fn check_weights(store: &WeightStore, arch: &Architecture) -> Result<()> {
    for (name, shape) in tensor_specs(arch) {
        store.require(&name, &shape)?;
    }
    Ok(())
}

fn matrix(store: &WeightStore, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let t = store.require(name, &[rows, cols])?;
    Ok(DMatrix::from_row_iterator(rows, cols, t.data.iter().map(|&v| v as f64)))
}

fn vector(store: &WeightStore, name: &str, len: usize) -> Result<DVector<f64>> {
    let t = store.require(name, &[len])?;
    Ok(DVector::from_iterator(len, t.data.iter().map(|&v| v as f64)))
}

fn linear(store: &WeightStore, prefix: &str, o: usize, i: usize) -> Result<Linear> {
    Linear::new(
        matrix(store, &format!("{prefix}.weight"), o, i)?,
        vector(store, &format!("{prefix}.bias"), o)?,
    )
}

fn norm(store: &WeightStore, prefix: &str, d: usize) -> Result<LayerNorm> {
    LayerNorm::new(vector(store, &format!("{prefix}.weight"), d)?, vector(store, &format!("{prefix}.bias"), d)?)
}

fn attention(store: &WeightStore, prefix: &str, arch: &Architecture) -> Result<AttentionLayer> {
    let d = arch.model_dim;
    let layer = AttentionLayer {
        wq: linear(store, &format!("{prefix}.wq"), d, d)?,
        wk: linear(store, &format!("{prefix}.wk"), d, d)?,
        wv: linear(store, &format!("{prefix}.wv"), d, d)?,
        wo: linear(store, &format!("{prefix}.wo"), d, d)?,
        ffn: Mlp::new(
            linear(store, &format!("{prefix}.ffn1"), arch.attention_hidden, d)?,
            linear(store, &format!("{prefix}.ffn2"), d, arch.attention_hidden)?,
            arch.slope,
        )?,
        norm1: norm(store, &format!("{prefix}.norm1"), d)?,
        norm2: norm(store, &format!("{prefix}.norm2"), d)?,
        heads: arch.heads,
    };
    layer.validate()?;
    Ok(layer)
}

/// Runnable layers built from a weight store.
#[derive(Debug)]
pub struct Model {
    pub fusion: FusionLayers,
    pub transformer: VisualGeometricTransformer,
    pub dustbin: f64,
}

impl Model {
    pub fn from_weights(store: &WeightStore, cfg: &PipelineConfig) -> Result<Self> {
        let a = &cfg.architecture;
        a.validate()?;
        check_weights(store, a)?;
        let (cv, c2, d) = (a.visual_channels, 2 * a.reduced_channels, a.model_dim);
        let mut weights = Vec::with_capacity(a.window * a.window);
        let mut biases = Vec::with_capacity(a.window * a.window);
        for p in 0..a.window {
            for q in 0..a.window {
                weights.push(matrix(store, &format!("fusion.window.weight[{p}][{q}]"), cv, cv)?);
                biases.push(vector(store, &format!("fusion.window.bias[{p}][{q}]"), cv)?);
            }
        }
        let fusion = FusionLayers {
            window: WindowConv::new(a.window, weights, biases)?,
            reduce_g: linear(store, "fusion.reduce_g", a.reduced_channels, a.geometric_channels)?,
            reduce_v: linear(store, "fusion.reduce_v", a.reduced_channels, cv)?,
            ffn: Mlp::new(
                linear(store, "fusion.ffn.layer1", a.fusion_hidden, c2)?,
                linear(store, "fusion.ffn.layer2", a.fused_dim, a.fusion_hidden)?,
                a.slope,
            )?,
            resize: linear(store, "fusion.resize", a.fused_dim, c2)?,
        };
        fusion.validate()?;
        let mlp = |m: &str| -> Result<Mlp> {
            Mlp::new(
                linear(store, &format!("vgt.pos.{m}.layer1"), a.positional_hidden, 2)?,
                linear(store, &format!("vgt.pos.{m}.layer2"), d / 2, a.positional_hidden)?,
                a.slope,
            )
        };
        let layers = (0..a.layers)
            .map(|l| {
                Ok(TransformerLayer {
                    self_attn: attention(store, &format!("vgt.layer{l}.self"), a)?,
                    cross_attn: attention(store, &format!("vgt.layer{l}.cross"), a)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let transformer = VisualGeometricTransformer {
            input_proj: linear(store, "vgt.input_proj", d, a.fused_dim)?,
            geometric: GeometricEmbedding {
                dist_proj: linear(store, "vgt.geo.dist_proj", d, d)?,
                angle_proj: linear(store, "vgt.geo.angle_proj", d, d)?,
                sigma_d: cfg.sigma_d(),
                sigma_a: a.sigma_a_deg,
                angle_k: a.angle_k,
            },
            wr: matrix(store, "vgt.shared.wr", d, d)?,
            slope: a.slope,
            positional: PositionalEncoder {
                mlp_p: mlp("mlp_p")?,
                mlp_pprime: mlp("mlp_pprime")?,
            },
            layers,
            mode: cfg.attention_mode,
            counters: CacheCounters::default(),
        };
        transformer.validate()?;
        let dustbin = vector(store, DUSTBIN, 1)?[0];
        if !dustbin.is_finite() {
            return Err(Error::NonFinite(DUSTBIN.into()));
        }
        Ok(Self {
            fusion,
            transformer,
            dustbin,
        })
    }
}
