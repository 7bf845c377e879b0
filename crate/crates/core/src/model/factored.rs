use crate::error::{Error, Result};
use crate::numerics::{orthonormality_error, svd_exact, Matrix};
use crate::scalar::Scalar;

/// Lower bound on stored singular values. Factor gradients divide by `S`.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// A weight matrix `W = U diag(s) V^T` kept in factored form at rank `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredWeight<T> {
    /// `m x r`, orthonormal columns.
    pub u: Matrix<T>,
    /// Length `r`, each entry `>= SIGMA_FLOOR`.
    pub s: Vec<T>,
    /// `r x n`, orthonormal rows.
    pub vt: Matrix<T>,
}

impl<T: Scalar> FactoredWeight<T> {
    pub fn new(u: Matrix<T>, s: Vec<T>, vt: Matrix<T>) -> Result<Self> {
        let r = s.len();
        if u.cols() != r || vt.rows() != r {
            return Err(Error::arg(format!(
                "factor shapes disagree: u {}x{}, s {}, vt {}x{}",
                u.rows(),
                u.cols(),
                r,
                vt.rows(),
                vt.cols()
            )));
        }
        Ok(FactoredWeight { u, s, vt })
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `(m, n)` of the represented matrix.
    pub fn dims(&self) -> (usize, usize) {
        (self.u.rows(), self.vt.cols())
    }

    /// Dense `U diag(s) V^T`.
    pub fn reconstruct(&self) -> Matrix<T> {
        self.u
            .scale_columns(&self.s)
            .and_then(|us| us.matmul(&self.vt))
            .expect("factor shapes checked at construction")
    }

    /// Row-batched product `x W^T` for `x` of shape `batch x n`, computed
    /// as `((x V) diag(s)) U^T` without forming `W`.
    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        x.matmul_t(&self.vt)?.scale_columns(&self.s)?.matmul_t(&self.u)
    }

    /// `delta W` for `delta` of shape `batch x m`.
    pub fn apply_transpose(&self, delta: &Matrix<T>) -> Result<Matrix<T>> {
        delta.matmul(&self.u)?.scale_columns(&self.s)?.matmul(&self.vt)
    }

    /// Raises every singular value to at least [`SIGMA_FLOOR`]. Returns the
    /// number of entries that were clamped.
    pub fn clamp_singular_values(&mut self) -> usize {
        clamp_to_floor(&mut self.s)
    }

    /// `max(|U^T U - I|_F, |V^T V - I|_F)`.
    pub fn ortho_drift(&self) -> T {
        let du = orthonormality_error(&self.u);
        let dv = orthonormality_error(&self.vt.transpose());
        du.max(dv)
    }

    pub fn cast<U: Scalar>(&self) -> FactoredWeight<U> {
        FactoredWeight {
            u: self.u.cast(),
            s: self.s.iter().map(|&x| U::of(x.as_f64())).collect(),
            vt: self.vt.cast(),
        }
    }
}

pub(crate) fn clamp_to_floor<T: Scalar>(s: &mut [T]) -> usize {
    let floor = T::of(SIGMA_FLOOR);
    let mut clamped = 0;
    for x in s.iter_mut() {
        if *x < floor {
            *x = floor;
            clamped += 1;
        }
    }
    clamped
}

/// Top-`r` SVD factors of `w`; singular values below [`SIGMA_FLOOR`] are
/// raised to it.
pub fn decompose_dense<T: Scalar>(w: &Matrix<T>, r: usize) -> Result<FactoredWeight<T>> {
    let kmax = w.rows().min(w.cols());
    if r == 0 || r > kmax {
        return Err(Error::arg(format!("rank {r} outside 1..={kmax}")));
    }
    let svd = svd_exact(w)?.truncate(r);
    let mut fw = FactoredWeight::new(svd.u, svd.s, svd.vt)?;
    fw.clamp_singular_values();
    Ok(fw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_factors() {
        let fw = decompose_dense(&Matrix::<f64>::identity(3), 3).unwrap();
        assert_eq!(fw.u, Matrix::identity(3));
        assert_eq!(fw.s, vec![1.0; 3]);
        assert_eq!(fw.vt, Matrix::identity(3));
    }

    #[test]
    fn rank_out_of_range() {
        let w = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(decompose_dense(&w, 0), Err(Error::Argument(_))));
        assert!(matches!(decompose_dense(&w, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn tiny_singular_values_are_floored() {
        let w = Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 0.0]]);
        let fw = decompose_dense(&w, 2).unwrap();
        assert_eq!(fw.s, vec![2.0, SIGMA_FLOOR]);
    }

    #[test]
    fn apply_matches_reconstruction() {
        let w = Matrix::from_fn(4, 3, |i, j| (i as f64 - 1.5) * (j as f64 + 0.5) + (i * j) as f64 * 0.1);
        let fw = decompose_dense(&w, 3).unwrap();
        let x = Matrix::from_fn(2, 3, |i, j| (i + 2 * j) as f64 - 1.0);
        let dense = x.matmul_t(&fw.reconstruct()).unwrap();
        let factored = fw.apply(&x).unwrap();
        assert!(dense.sub(&factored).unwrap().frobenius_norm() < 1e-12);
        let d = Matrix::from_fn(2, 4, |i, j| (i * 4 + j) as f64 * 0.3 - 1.0);
        let back = d.matmul(&fw.reconstruct()).unwrap();
        assert!(back.sub(&fw.apply_transpose(&d).unwrap()).unwrap().frobenius_norm() < 1e-12);
    }
}
