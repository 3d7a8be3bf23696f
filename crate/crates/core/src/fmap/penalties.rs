use nalgebra::DMatrix;

use super::masks::normalized_spectrum;
use crate::diffgraph::Var;
use crate::error::{Error, Result};

/// `|C C^T - I|^2`
pub fn ortho_penalty(c: &DMatrix<f64>) -> f64 {
    let k = c.nrows();
    (c * c.transpose() - DMatrix::<f64>::identity(k, k)).norm_squared()
}

/// `|C12 C21 - I|^2`
pub fn bij_penalty(c12: &DMatrix<f64>, c21: &DMatrix<f64>) -> Result<f64> {
    if c12.ncols() != c21.nrows() || c12.nrows() != c21.ncols() {
        return Err(Error::shape("bijectivity penalty needs transposed shapes"));
    }
    let k = c12.nrows();
    Ok((c12 * c21 - DMatrix::<f64>::identity(k, k)).norm_squared())
}

fn commute_weights(c: (usize, usize), lambda1: &[f64], lambda2: &[f64]) -> Result<DMatrix<f64>> {
    if lambda1.len() < c.1 || lambda2.len() < c.0 {
        return Err(Error::shape("spectrum shorter than map"));
    }
    let l1 = normalized_spectrum(&lambda1[..c.1]);
    let l2 = normalized_spectrum(&lambda2[..c.0]);
    // (C diag(l1) - diag(l2) C)_ij = C_ij (l1_j - l2_i)
    Ok(DMatrix::from_fn(c.0, c.1, |i, j| l1[j] - l2[i]))
}

/// `|C diag(l1) - diag(l2) C|^2` on max-normalized spectra.
pub fn lap_commute_penalty(c: &DMatrix<f64>, lambda1: &[f64], lambda2: &[f64]) -> Result<f64> {
    let w = commute_weights(c.shape(), lambda1, lambda2)?;
    Ok(c.component_mul(&w).norm_squared())
}

pub fn ortho_penalty_var(c: Var<'_>) -> Result<Var<'_>> {
    let k = c.shape().0;
    Ok(c.matmul(c.transpose())?
        .add_const(&(-DMatrix::<f64>::identity(k, k)))?
        .frobenius_sq())
}

pub fn bij_penalty_var<'t>(c12: Var<'t>, c21: Var<'t>) -> Result<Var<'t>> {
    let k = c12.shape().0;
    Ok(c12
        .matmul(c21)?
        .add_const(&(-DMatrix::<f64>::identity(k, k)))?
        .frobenius_sq())
}

pub fn lap_commute_penalty_var<'t>(c: Var<'t>, lambda1: &[f64], lambda2: &[f64]) -> Result<Var<'t>> {
    let w = commute_weights(c.shape(), lambda1, lambda2)?;
    Ok(c.hadamard_const(&w)?.frobenius_sq())
}
