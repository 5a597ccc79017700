//! Small dense linear-algebra helpers shared by the exact evaluators.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Maximum acceptable infinity-norm residual for an exact solve.
pub(crate) const SOLVE_RESIDUAL_TOL: f64 = 1e-9;

/// Solves the dense system `a x = b` by LU with partial pivoting and checks
/// the residual. Systems here are of the form `I - gamma * P` with `P`
/// substochastic, hence strictly diagonally dominant and well conditioned.
pub(crate) fn solve(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::dim(format!(
            "solve expects square system, got {}x{} with rhs {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let m = DMatrix::from_row_iterator(n, n, a.iter().copied());
    let rhs = DVector::from_iterator(n, b.iter().copied());
    let x = m
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("linear system is singular".into()))?;
    let residual = (&m * &x - &rhs).amax();
    if !residual.is_finite() || residual > SOLVE_RESIDUAL_TOL {
        return Err(Error::Numeric(format!(
            "linear solve residual {residual:.3e} exceeds {SOLVE_RESIDUAL_TOL:.1e}"
        )));
    }
    Ok(Array1::from_iter(x.iter().copied()))
}

/// Infinity norm of the elementwise difference of two arrays.
pub(crate) fn linf_diff<'a, I, J>(a: I, b: J) -> f64
where
    I: IntoIterator<Item = &'a f64>,
    J: IntoIterator<Item = &'a f64>,
{
    a.into_iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
