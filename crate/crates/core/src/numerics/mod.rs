//! Dense real linear algebra: SVD (exact and randomized), principal angles,
//! Stiefel tangent projection and Frobenius cosine.

mod angles;
mod matrix;
mod qr;
mod svd;

pub use angles::principal_angles;
pub use matrix::Matrix;
pub use qr::{orthonormalize, orthonormalize_completing};
pub use svd::{svd_exact, svd_truncated_randomized, SvdTriple, OVERSAMPLING, POWER_ITERATIONS};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Projects `g` onto the tangent space of the Stiefel manifold at `u`,
/// i.e. returns `(I - u u^T) g` without forming the `m x m` projector.
pub fn tangent_project<T: Scalar>(u: &Matrix<T>, g: &Matrix<T>) -> Result<Matrix<T>> {
    if u.shape() != g.shape() {
        return Err(Error::arg(format!(
            "tangent_project: u is {}x{}, g is {}x{}",
            u.rows(),
            u.cols(),
            g.rows(),
            g.cols()
        )));
    }
    let coeffs = u.t_matmul(g)?;
    g.sub(&u.matmul(&coeffs)?)
}

/// `<a, b>_F / (|a|_F |b|_F)`, clamped to `[-1, 1]`.
pub fn frobenius_cosine<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
    let inner = a.frobenius_dot(b)?;
    let na = a.frobenius_norm();
    let nb = b.frobenius_norm();
    if na == T::zero() || nb == T::zero() {
        return Err(Error::UndefinedCosine);
    }
    Ok((inner / (na * nb)).max(-T::one()).min(T::one()))
}

/// `|u^T u - I|_F`, the departure of `u`'s columns from orthonormality.
pub fn orthonormality_error<T: Scalar>(u: &Matrix<T>) -> T {
    u.gram()
        .sub(&Matrix::identity(u.cols()))
        .expect("square gram")
        .frobenius_norm()
}

/// Radians-to-degrees factor.
pub(crate) fn to_degrees<T: Scalar>(rad: T) -> T {
    rad * T::of(180.0 / std::f64::consts::PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projecting_u_onto_itself_vanishes() {
        let u = Matrix::<f64>::identity(4).select_columns(&[0, 2]);
        let p = tangent_project(&u, &u).unwrap();
        assert!(p.frobenius_norm() < 1e-15);
    }

    #[test]
    fn orthogonal_complement_is_untouched() {
        let u = Matrix::<f64>::identity(4).select_columns(&[0, 1]);
        let g = Matrix::from_fn(4, 2, |i, j| if i >= 2 { (i + j) as f64 } else { 0.0 });
        assert_eq!(tangent_project(&u, &g).unwrap(), g);
    }

    #[test]
    fn tangent_project_shape_mismatch() {
        let u = Matrix::<f64>::zeros(3, 2);
        let g = Matrix::<f64>::zeros(3, 1);
        assert!(matches!(tangent_project(&u, &g), Err(Error::Argument(_))));
    }

    #[test]
    fn cosine_cases() {
        let a = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = Matrix::from_rows(&[&[0.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(frobenius_cosine(&a, &a).unwrap(), 1.0);
        assert_eq!(frobenius_cosine(&a, &a.scale(-1.0)).unwrap(), -1.0);
        assert_eq!(frobenius_cosine(&a, &b).unwrap(), 0.0);
        assert!(matches!(
            frobenius_cosine(&a, &Matrix::zeros(2, 2)),
            Err(Error::UndefinedCosine)
        ));
    }
}
