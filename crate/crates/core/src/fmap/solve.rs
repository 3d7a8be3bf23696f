use nalgebra::{Cholesky, DMatrix};

use super::{FunctionalMap, Mask};
use crate::diffgraph::{hstack, Var};
use crate::error::{Error, Result};

/// Numerical options for the masked least-squares solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Ridge added to every row system, relative to `trace(A1 A1^T)`.
    /// `None` disables it.
    pub ridge: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { ridge: Some(1e-9) }
    }
}

fn check_dims(a1: (usize, usize), a2: (usize, usize), mask: Option<(usize, usize)>, alpha: f64) -> Result<()> {
    if a1.1 != a2.1 {
        return Err(Error::shape(format!("descriptor counts differ: {} vs {}", a1.1, a2.1)));
    }
    if let Some(m) = mask {
        if m != (a2.0, a1.0) {
            return Err(Error::shape(format!("mask is {m:?}, map is {:?}", (a2.0, a1.0))));
        }
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(())
}

fn ridge_value(gram: &DMatrix<f64>, opts: SolveOptions) -> f64 {
    opts.ridge.map_or(0.0, |r| r * gram.trace())
}

/// Minimizes `|C A1 - A2|^2 + alpha |M .* C|^2` row by row.
///
/// Row `i` of `C` solves `(A1 A1^T + alpha diag(M_i .* M_i) + r I) c = A1 a2_i^T`.
pub fn solve_fmap(
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    alpha: f64,
    mask: Option<&Mask>,
    opts: SolveOptions,
) -> Result<FunctionalMap> {
    check_dims(a1.shape(), a2.shape(), mask.map(|m| m.shape()), alpha)?;
    let k1 = a1.nrows();
    let k2 = a2.nrows();
    let mut gram = a1 * a1.transpose();
    let r = ridge_value(&gram, opts);
    for j in 0..k1 {
        gram[(j, j)] += r;
    }
    let rhs = a1 * a2.transpose();
    let masked = mask.filter(|_| alpha > 0.0);
    let mut c = DMatrix::zeros(k2, k1);
    match masked {
        None => {
            let chol = Cholesky::new(gram).ok_or(Error::SingularSystem)?;
            c = chol.solve(&rhs).transpose();
        }
        Some(m) => {
            for i in 0..k2 {
                let mut a = gram.clone();
                for j in 0..k1 {
                    a[(j, j)] += alpha * m.matrix()[(i, j)].powi(2);
                }
                let chol = Cholesky::new(a).ok_or(Error::SingularSystem)?;
                let x = chol.solve(&rhs.column(i).into_owned());
                c.set_row(i, &x.transpose());
            }
        }
    }
    FunctionalMap::new(c)
}

/// Differentiable version of [`solve_fmap`] on a tape. The ridge is computed
/// from the current value of `A1 A1^T` and held constant.
pub fn solve_fmap_var<'t>(
    a1: Var<'t>,
    a2: Var<'t>,
    alpha: f64,
    mask: Option<&Mask>,
    opts: SolveOptions,
) -> Result<Var<'t>> {
    check_dims(a1.shape(), a2.shape(), mask.map(|m| m.shape()), alpha)?;
    let k1 = a1.shape().0;
    let k2 = a2.shape().0;
    let gram = a1.matmul(a1.transpose())?;
    let r = ridge_value(&gram.value(), opts);
    let rhs = a1.matmul(a2.transpose())?;
    let ridge = DMatrix::identity(k1, k1) * r;
    match mask.filter(|_| alpha > 0.0) {
        None => Ok(gram.add_const(&ridge)?.psd_solve(rhs)?.transpose()),
        Some(m) => {
            let mut cols = Vec::with_capacity(k2);
            for i in 0..k2 {
                let mut d = ridge.clone();
                for j in 0..k1 {
                    d[(j, j)] += alpha * m.matrix()[(i, j)].powi(2);
                }
                cols.push(gram.add_const(&d)?.psd_solve(rhs.column(i)?)?);
            }
            Ok(hstack(&cols)?.transpose())
        }
    }
}
