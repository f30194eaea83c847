//! Dense symmetric eigensolver glue (backed by nalgebra) and a few small
//! matrix helpers shared across modules.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};

use crate::error::{HydroError, Result};

fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

/// Largest absolute asymmetry `max |a_ij − a_ji|`.
pub fn asymmetry(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

pub fn require_symmetric(a: &Array2<f64>, tol: f64, what: &str) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(HydroError::shape(format!(
            "{what}: expected a square matrix, got {}×{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let asym = asymmetry(a);
    if asym > tol {
        return Err(HydroError::contract(format!(
            "{what}: matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    Ok(())
}

/// Full eigendecomposition of a symmetric matrix. Eigenvalues ascend;
/// column `k` of the returned matrix is the unit eigenvector of value `k`.
pub fn sym_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let eig = to_nalgebra(a).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (col, &k) in order.iter().enumerate() {
        for row in 0..n {
            vectors[[row, col]] = eig.eigenvectors[(row, k)];
        }
    }
    (values, vectors)
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let mut values: Vec<f64> = to_nalgebra(a)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .collect();
    values.sort_by(f64::total_cmp);
    values
}
