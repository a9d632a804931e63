//! Log-domain Sinkhorn normalization with an optional slack row and column.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

fn logsumexp<I: Iterator<Item = f64> + Clone>(it: I) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Assignment probabilities for an `m × n` score matrix.
///
/// With `slack = Some(α)` the result is `(m+1) × (n+1)`: the last row and
/// column hold the score `α`, real rows and columns carry unit mass and the
/// slack row and column absorb `n` and `m` respectively. Without slack, rows
/// carry unit mass and columns `m / n`.
pub fn sinkhorn(scores: &DMatrix<f64>, iterations: usize, slack: Option<f64>) -> Result<DMatrix<f64>> {
    let (m, n) = scores.shape();
    if m == 0 || n == 0 {
        return Err(Error::EmptyInput);
    }
    if iterations == 0 {
        return Err(Error::InvalidArgument("sinkhorn needs at least one iteration".into()));
    }
    if scores.iter().any(|v| v.is_nan()) || slack.is_some_and(f64::is_nan) {
        return Err(Error::NonFinite("sinkhorn scores".into()));
    }
    let (z, log_mu, log_nu) = match slack {
        Some(alpha) => {
            let mut z = DMatrix::from_element(m + 1, n + 1, alpha);
            z.view_mut((0, 0), (m, n)).copy_from(scores);
            let mut mu = vec![0.0; m + 1];
            mu[m] = (n as f64).ln();
            let mut nu = vec![0.0; n + 1];
            nu[n] = (m as f64).ln();
            (z, mu, nu)
        }
        None => (scores.clone(), vec![0.0; m], vec![(m as f64 / n as f64).ln(); n]),
    };
    let (rows, cols) = z.shape();
    let mut u = vec![0.0; rows];
    let mut v = vec![0.0; cols];
    for _ in 0..iterations {
        for i in 0..rows {
            u[i] = log_mu[i] - logsumexp((0..cols).map(|j| z[(i, j)] + v[j]));
        }
        for j in 0..cols {
            v[j] = log_nu[j] - logsumexp((0..rows).map(|i| z[(i, j)] + u[i]));
        }
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| (z[(i, j)] + u[i] + v[j]).exp()))
}
