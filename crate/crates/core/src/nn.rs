//! Minimal forward-only layers. Feature matrices are row-per-item.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_SLOPE: f64 = 0.01;

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn leaky_relu_inplace(m: &mut DMatrix<f64>, slope: f64) {
    m.apply(|v| *v = leaky_relu(*v, slope));
}

/// Affine map `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if bias.len() != weight.nrows() {
            return Err(Error::shape("linear bias", weight.nrows(), bias.len()));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: DMatrix::zeros(out_dim, in_dim),
            bias: DVector::zeros(out_dim),
        }
    }

    /// Ones on the leading diagonal, zero bias (truncating or zero-padding).
    pub fn identity_like(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: DMatrix::identity(out_dim, in_dim),
            bias: DVector::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::shape("linear input", self.in_dim(), x.ncols()));
        }
        let mut y = x * self.weight.transpose();
        for mut row in y.row_iter_mut() {
            row += self.bias.transpose();
        }
        Ok(y)
    }

    pub fn forward_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::shape("linear input", self.in_dim(), x.len()));
        }
        Ok(&self.weight * x + &self.bias)
    }
}

/// Per-row layer normalization with affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(gamma: DVector<f64>, beta: DVector<f64>) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::shape("layer norm", gamma.len(), beta.len()));
        }
        Ok(Self { gamma, beta, eps: 1e-5 })
    }

    pub fn unit(dim: usize) -> Self {
        Self {
            gamma: DVector::from_element(dim, 1.0),
            beta: DVector::zeros(dim),
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::shape("layer norm input", self.dim(), x.ncols()));
        }
        let d = x.ncols() as f64;
        let mut y = x.clone();
        for mut row in y.row_iter_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + self.eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.gamma[j] + self.beta[j];
            }
        }
        Ok(y)
    }
}

/// `layer2(φ(layer1(x)))`, φ the leaky rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layer1: Linear,
    pub layer2: Linear,
    pub slope: f64,
}

impl Mlp {
    pub fn new(layer1: Linear, layer2: Linear, slope: f64) -> Result<Self> {
        if layer2.in_dim() != layer1.out_dim() {
            return Err(Error::shape("mlp hidden", layer1.out_dim(), layer2.in_dim()));
        }
        Ok(Self { layer1, layer2, slope })
    }

    pub fn in_dim(&self) -> usize {
        self.layer1.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layer2.out_dim()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut h = self.layer1.forward(x)?;
        leaky_relu_inplace(&mut h, self.slope);
        self.layer2.forward(&h)
    }
}
