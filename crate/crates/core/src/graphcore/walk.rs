use ndarray::{Array2, Axis};

use crate::adgrad::ZERO_DEGREE;
use crate::error::{HydroError, Result};

fn check_weights(a: &Array2<f64>, what: &str) -> Result<usize> {
    let (r, c) = a.dim();
    if r != c {
        return Err(HydroError::shape(format!(
            "{what}: expected square, got {r}×{c}"
        )));
    }
    if let Some(w) = a.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(HydroError::domain(format!("{what}: entry {w}")));
    }
    Ok(r)
}

/// Row-stochastic lazy walk `½(I + D⁻¹A)`. A row whose degree is at most
/// [`ZERO_DEGREE`] is absorbing: it becomes the identity row.
pub fn lazy_walk_synthetic(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = check_weights(a, "lazy_walk_synthetic")?;
    let deg = a.sum_axis(Axis(1));
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        if deg[i] <= ZERO_DEGREE {
            w[[i, i]] = 1.0;
            continue;
        }
        for j in 0..n {
            w[[i, j]] = 0.5 * a[[i, j]] / deg[i];
        }
        w[[i, i]] += 0.5;
    }
    Ok(w)
}

/// `½(I + D^{-1/2}AD^{-1/2})`, similar to [`lazy_walk_synthetic`] for
/// symmetric `A` and therefore sharing its spectrum.
pub fn lazy_walk_synthetic_symmetric(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = check_weights(a, "lazy_walk_synthetic_symmetric")?;
    let deg = a.sum_axis(Axis(1));
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        if deg[i] <= ZERO_DEGREE {
            w[[i, i]] = 1.0;
            continue;
        }
        for j in 0..n {
            if deg[j] > ZERO_DEGREE {
                w[[i, j]] = 0.5 * a[[i, j]] / (deg[i] * deg[j]).sqrt();
            }
        }
        w[[i, i]] += 0.5;
    }
    Ok(w)
}

/// `½(I + D̃^{-1/2}(A + I)D̃^{-1/2})` with `D̃` the degrees of `A + I`.
pub fn lazy_walk_sampled(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = check_weights(a, "lazy_walk_sampled")?;
    let mut tilde = a.clone();
    for i in 0..n {
        tilde[[i, i]] += 1.0;
    }
    let deg = tilde.sum_axis(Axis(1));
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            w[[i, j]] = 0.5 * tilde[[i, j]] / (deg[i] * deg[j]).sqrt();
        }
        w[[i, i]] += 0.5;
    }
    Ok(w)
}
