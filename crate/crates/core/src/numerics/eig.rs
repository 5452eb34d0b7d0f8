use nalgebra::DMatrix;

use super::Tensor;
use crate::error::{Error, Result};

/// Largest tolerated asymmetry, relative to `max(1, max|m|)`.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Eigen-decomposition of a symmetric matrix. Eigenvalues are sorted in
/// descending order and column `i` of `vectors` pairs with `values[i]`.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Tensor,
    pub vectors: Tensor,
}

impl SymEigen {
    pub fn size(&self) -> usize {
        self.values.len()
    }

    /// Component `row` of eigenvector `col`.
    pub fn vector(&self, row: usize, col: usize) -> f64 {
        self.vectors.data()[row * self.size() + col]
    }
}

pub(crate) fn to_matrix(m: &Tensor) -> DMatrix<f64> {
    let n = m.dim(0);
    DMatrix::from_row_slice(n, m.dim(1), m.data())
}

pub(crate) fn check_square(m: &Tensor, what: &str) -> Result<usize> {
    if m.ndim() != 2 || m.dim(0) != m.dim(1) || m.dim(0) == 0 {
        return Err(Error::dim(format!(
            "{what} expects a non-empty square matrix, got {:?}",
            m.shape()
        )));
    }
    Ok(m.dim(0))
}

pub fn symmetrize(m: &Tensor) -> Result<Tensor> {
    let n = check_square(m, "symmetrize")?;
    let d = m.data();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = 0.5 * (d[i * n + j] + d[j * n + i]);
        }
    }
    Ok(Tensor::from_parts(vec![n, n], out))
}

pub fn sym_eig(m: &Tensor) -> Result<SymEigen> {
    let n = check_square(m, "sym_eig")?;
    let d = m.data();
    let scale = m.max_abs().max(1.0);
    for i in 0..n {
        for j in i + 1..n {
            let gap = (d[i * n + j] - d[j * n + i]).abs();
            if gap > SYMMETRY_TOL * scale {
                return Err(Error::contract(format!(
                    "sym_eig: entries ({i},{j}) and ({j},{i}) differ by {gap:e}"
                )));
            }
        }
    }
    let eig = nalgebra::SymmetricEigen::new(to_matrix(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &k) in order.iter().enumerate() {
        for row in 0..n {
            vectors[row * n + col] = eig.eigenvectors[(row, k)];
        }
    }
    Ok(SymEigen {
        values: Tensor::new(vec![n], values)?,
        vectors: Tensor::new(vec![n, n], vectors)?,
    })
}
