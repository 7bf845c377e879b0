//! Column orthonormalization (thin QR `Q` factor).
//!
//! Modified Gram-Schmidt with a second reorthogonalization pass per column,
//! which keeps `Q^T Q - I` at the level of machine precision even for
//! nearly dependent inputs.

use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, Matrix};
use crate::scalar::Scalar;

/// Relative residual below which a column counts as linearly dependent on
/// its predecessors.
fn dependence_tol<T: Scalar>(rows: usize) -> T {
    T::epsilon() * T::of(1000.0) * T::of(rows.max(1) as f64)
}

/// Orthonormal basis for the column space of `a` (`m x k`, `k <= m`).
///
/// Fails with an argument error when `a` is rank deficient.
pub fn orthonormalize<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let (q, rank) = orthonormalize_impl(a, false)?;
    debug_assert_eq!(rank, a.cols());
    Ok(q)
}

/// Like [`orthonormalize`], but dependent columns are replaced by unit
/// vectors orthogonal to everything before them, so the result always has
/// `k` orthonormal columns. Returns the basis and the numerical rank of `a`.
pub fn orthonormalize_completing<T: Scalar>(a: &Matrix<T>) -> Result<(Matrix<T>, usize)> {
    orthonormalize_impl(a, true)
}

fn orthonormalize_impl<T: Scalar>(a: &Matrix<T>, complete: bool) -> Result<(Matrix<T>, usize)> {
    let (m, k) = a.shape();
    if k > m {
        return Err(Error::arg(format!(
            "cannot orthonormalize {k} columns in dimension {m}"
        )));
    }
    let tol = dependence_tol::<T>(m);
    let mut basis: Vec<Vec<T>> = Vec::with_capacity(k);
    let mut rank = 0;
    // Next standard basis vector to try when completing.
    let mut next_unit = 0;

    for j in 0..k {
        let col = a.column(j);
        let norm0 = norm(&col);
        let mut v = col;
        project_out(&mut v, &basis);
        let nv = norm(&v);
        if norm0 > T::zero() && nv > tol * norm0 {
            rank += 1;
            basis.push(v.into_iter().map(|x| x / nv).collect());
            continue;
        }
        if !complete {
            return Err(Error::arg(format!(
                "column {j} is linearly dependent (rank deficient input)"
            )));
        }
        loop {
            if next_unit >= m {
                return Err(Error::numerical("failed to complete an orthonormal basis"));
            }
            let mut e = vec![T::zero(); m];
            e[next_unit] = T::one();
            next_unit += 1;
            project_out(&mut e, &basis);
            let ne = norm(&e);
            if ne > T::of(0.5) {
                basis.push(e.into_iter().map(|x| x / ne).collect());
                break;
            }
        }
    }

    let mut q = Matrix::zeros(m, k);
    for (j, col) in basis.iter().enumerate() {
        q.set_column(j, col);
    }
    Ok((q, rank))
}

fn project_out<T: Scalar>(v: &mut [T], basis: &[Vec<T>]) {
    for _ in 0..2 {
        for q in basis {
            let c = dot(q, v);
            for (x, &qi) in v.iter_mut().zip(q) {
                *x -= c * qi;
            }
        }
    }
}

fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}
