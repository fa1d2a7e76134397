//! Small dense helpers bridging `nalgebra` (d × d factorizations) and
//! `ndarray` (batched row-major data).

use nalgebra::DMatrix;
use ndarray::Array2;

use crate::error::{Error, Result};

pub fn to_ndarray(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

pub fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Symmetric positive definite matrix with its cached factorizations.
#[derive(Clone, Debug)]
pub struct SpdMatrix {
    pub matrix: DMatrix<f64>,
    /// Lower Cholesky factor `L` with `L Lᵀ = matrix`.
    pub chol: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub log_det: f64,
}

impl SpdMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let chol = sym
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Contract("matrix is not positive definite".into()))?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let inverse = chol.inverse();
        Ok(Self { matrix: sym, chol: l, inverse, log_det })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}
