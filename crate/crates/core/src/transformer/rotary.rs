//! Rotary position encoding from normalized pixel positions.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::nn::Mlp;

/// Rotate consecutive pairs `(x_2m, x_2m+1)` by `p_m` in place.
pub fn rotate_in_place(p: &[f64], x: &mut [f64]) {
    debug_assert_eq!(x.len(), 2 * p.len());
    for (m, &a) in p.iter().enumerate() {
        let (s, c) = a.sin_cos();
        let (x0, x1) = (x[2 * m], x[2 * m + 1]);
        x[2 * m] = c * x0 - s * x1;
        x[2 * m + 1] = s * x0 + c * x1;
    }
}

/// `R(p) x` without materializing `R(p)`.
pub fn rotary_apply(p: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != 2 * p.len() {
        return Err(Error::shape("rotary input", 2 * p.len(), x.len()));
    }
    let mut out = x.to_vec();
    rotate_in_place(p, &mut out);
    Ok(out)
}

/// Row `i` of `x` rotated by row `i` of `angles`.
pub fn rotate_rows(angles: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != 2 * angles.ncols() || x.nrows() != angles.nrows() {
        return Err(Error::shape(
            "rotary rows",
            format!("{}×{}", angles.nrows(), 2 * angles.ncols()),
            format!("{}×{}", x.nrows(), x.ncols()),
        ));
    }
    let mut out = x.clone();
    let mut p = vec![0.0; angles.ncols()];
    let mut row = vec![0.0; x.ncols()];
    for i in 0..x.nrows() {
        p.iter_mut().zip(angles.row(i).iter()).for_each(|(d, s)| *d = *s);
        row.iter_mut().zip(x.row(i).iter()).for_each(|(d, s)| *d = *s);
        rotate_in_place(&p, &mut row);
        out.row_mut(i).copy_from_slice(&row);
    }
    Ok(out)
}

/// Angle vectors `p` (query–key) and `p'` (query–embedding) per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoder {
    pub mlp_p: Mlp,
    pub mlp_pprime: Mlp,
}

impl PositionalEncoder {
    pub fn angle_dim(&self) -> usize {
        self.mlp_p.out_dim()
    }

    pub fn validate(&self, model_dim: usize) -> Result<()> {
        for (name, m) in [("p", &self.mlp_p), ("p'", &self.mlp_pprime)] {
            if m.in_dim() != 2 || m.out_dim() * 2 != model_dim {
                return Err(Error::shape(
                    format!("positional MLP {name}"),
                    format!("2 → {}", model_dim / 2),
                    format!("{} → {}", m.in_dim(), m.out_dim()),
                ));
            }
        }
        Ok(())
    }

    pub fn angles(&self, normalized: &[[f64; 2]]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let pos = DMatrix::from_fn(normalized.len(), 2, |i, j| normalized[i][j]);
        Ok((self.mlp_p.forward(&pos)?, self.mlp_pprime.forward(&pos)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{leaky_relu, Linear, DEFAULT_SLOPE};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn zero_angle_is_identity() {
        let x = vec![1.0, -2.0, 3.0, 0.5];
        assert_eq!(rotary_apply(&[0.0, 0.0], &x).unwrap(), x);
    }

    #[test]
    fn quarter_turn() {
        let y = rotary_apply(&[FRAC_PI_2], &[1.0, 0.0]).unwrap();
        assert!(y[0].abs() < 1e-15 && (y[1] - 1.0).abs() < 1e-15);
        assert!(rotary_apply(&[0.0], &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = rotary_apply(&p, &x).unwrap();
        assert!((dot(&x, &x) - dot(&y, &y)).abs() < 1e-12);
    }

    #[test]
    fn relative_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for d in [8usize, 64] {
            for _ in 0..200 {
                let mut r = |n: usize, s: f64| (0..n).map(|_| rng.random_range(-s..s)).collect::<Vec<f64>>();
                let (pi, pj, q, k) = (r(d / 2, 10.0), r(d / 2, 10.0), r(d, 1.0), r(d, 1.0));
                let lhs = dot(&rotary_apply(&pi, &q).unwrap(), &rotary_apply(&pj, &k).unwrap());
                let rel: Vec<f64> = pj.iter().zip(&pi).map(|(a, b)| a - b).collect();
                let rhs = dot(&q, &rotary_apply(&rel, &k).unwrap());
                assert!((lhs - rhs).abs() < 1e-9, "d={d}: {lhs} vs {rhs}");
            }
        }
    }

    fn random_mlp(rng: &mut ChaCha8Rng, hidden: usize, out: usize) -> Mlp {
        let mut lin = |o: usize, i: usize| {
            Linear::new(
                DMatrix::from_fn(o, i, |_, _| rng.random_range(-1.0..1.0)),
                DVector::from_fn(o, |_, _| rng.random_range(-1.0..1.0)),
            )
            .unwrap()
        };
        let l1 = lin(hidden, 2);
        let l2 = lin(out, hidden);
        Mlp::new(l1, l2, DEFAULT_SLOPE).unwrap()
    }

    #[test]
    fn angles_follow_two_layer_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = PositionalEncoder {
            mlp_p: random_mlp(&mut rng, 5, 4),
            mlp_pprime: random_mlp(&mut rng, 5, 4),
        };
        enc.validate(8).unwrap();
        let pos = [[0.1, 0.9], [0.5, 0.5], [0.1, 0.9]];
        let (p, pp) = enc.angles(&pos).unwrap();
        assert_eq!(p.row(0), p.row(2));
        assert_ne!(p, pp);
        for (i, uv) in pos.iter().enumerate() {
            let m = &enc.mlp_p;
            let h: Vec<f64> = (0..5)
                .map(|o| leaky_relu(m.layer1.weight[(o, 0)] * uv[0] + m.layer1.weight[(o, 1)] * uv[1] + m.layer1.bias[o], DEFAULT_SLOPE))
                .collect();
            for o in 0..4 {
                let want = (0..5).map(|t| m.layer2.weight[(o, t)] * h[t]).sum::<f64>() + m.layer2.bias[o];
                assert!((p[(i, o)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_mlp_gives_zero_angles() {
        let zero = Mlp::new(Linear::zeros(3, 2), Linear::zeros(4, 3), DEFAULT_SLOPE).unwrap();
        let enc = PositionalEncoder {
            mlp_p: zero.clone(),
            mlp_pprime: zero,
        };
        let (p, pp) = enc.angles(&[[0.3, 0.7], [1.0, 0.0]]).unwrap();
        assert!(p.iter().chain(pp.iter()).all(|&v| v == 0.0));
    }
}
