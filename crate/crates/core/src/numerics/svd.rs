//! Singular value decompositions.
//!
//! [`svd_exact`] is a one-sided (Hestenes) Jacobi SVD. It orthogonalizes
//! the columns of a working copy by plane rotations until every pair is
//! orthogonal to working precision; the column norms are then the singular
//! values. It is slower than bidiagonalization for large inputs but
//! computes small singular values to high relative accuracy and is fully
//! deterministic.
//!
//! [`svd_truncated_randomized`] is the Halko-Martinsson-Tropp range finder
//! with a Gaussian sketch, followed by an exact SVD of the small projected
//! matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, Matrix};
use crate::numerics::qr::orthonormalize_completing;
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 80;

/// Columns added to the sketch beyond the requested rank.
pub const OVERSAMPLING: usize = 8;
/// Subspace (power) iterations applied to the sketch.
pub const POWER_ITERATIONS: usize = 2;

/// Thin SVD `u * diag(s) * vt` with `s` sorted in non-increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdTriple<T> {
    pub u: Matrix<T>,
    pub s: Vec<T>,
    pub vt: Matrix<T>,
}

impl<T: Scalar> SvdTriple<T> {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix<T> {
        self.u
            .scale_columns(&self.s)
            .and_then(|us| us.matmul(&self.vt))
            .expect("svd factors have consistent shapes")
    }

    /// Leading `r` components.
    pub fn truncate(&self, r: usize) -> Self {
        let r = r.min(self.s.len());
        let idx: Vec<usize> = (0..r).collect();
        SvdTriple {
            u: self.u.select_columns(&idx),
            s: self.s[..r].to_vec(),
            vt: self.vt.select_rows(&idx),
        }
    }
}

/// Full thin SVD: for an `m x n` input, `u` is `m x k`, `vt` is `k x n`
/// with `k = min(m, n)`.
pub fn svd_exact<T: Scalar>(m: &Matrix<T>) -> Result<SvdTriple<T>> {
    if !m.is_finite() {
        return Err(Error::arg("svd input contains non-finite entries"));
    }
    if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let t = jacobi_tall(&m.transpose())?;
        Ok(SvdTriple {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        })
    }
}

fn jacobi_tall<T: Scalar>(a: &Matrix<T>) -> Result<SvdTriple<T>> {
    let (m, n) = a.shape();
    // Row j of `work` holds column j of the evolving matrix; same for `v`.
    let mut work = a.transpose();
    let mut v = Matrix::<T>::identity(n);
    let eps = T::epsilon();

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let alpha = dot(work.row(p), work.row(p));
                let beta = dot(work.row(q), work.row(q));
                let gamma = dot(work.row(p), work.row(q));
                if alpha == T::zero() || beta == T::zero() {
                    continue;
                }
                if gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (gamma + gamma);
                let t = zeta.signum() / (zeta.abs() + T::one().hypot(zeta));
                let c = T::one() / T::one().hypot(t);
                let s = c * t;
                rotate_rows(&mut work, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::numerical(format!(
            "jacobi svd did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<T> = (0..n).map(|j| dot(work.row(j), work.row(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the result deterministic for ties.
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));

    let smax = order.first().map_or(T::zero(), |&i| norms[i]);
    let tiny = smax * eps * T::of(m.max(n) as f64);
    let mut u = Matrix::zeros(m, n);
    let mut vt = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut degenerate = false;
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > tiny && sigma > T::zero() {
            for i in 0..m {
                u[(i, k)] = work[(j, i)] / sigma;
            }
        } else {
            degenerate = true;
        }
        vt.row_mut(k).copy_from_slice(v.row(j));
    }
    if degenerate {
        u = orthonormalize_completing(&u)?.0;
    }
    Ok(SvdTriple { u, s, vt })
}

fn rotate_rows<T: Scalar>(m: &mut Matrix<T>, p: usize, q: usize, c: T, s: T) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    let (head, tail) = data.split_at_mut(q * cols);
    let rp = &mut head[p * cols..(p + 1) * cols];
    let rq = &mut tail[..cols];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Rank-`r` truncated SVD from a seeded Gaussian sketch.
///
/// Deterministic for a fixed `seed`. Exact (to rounding) when `m` has rank
/// at most `r`.
pub fn svd_truncated_randomized<T: Scalar>(m: &Matrix<T>, r: usize, seed: u64) -> Result<SvdTriple<T>> {
    let (rows, cols) = m.shape();
    let kmax = rows.min(cols);
    if r == 0 || r > kmax {
        return Err(Error::arg(format!("randomized svd rank {r} outside 1..={kmax}")));
    }
    if !m.is_finite() {
        return Err(Error::arg("svd input contains non-finite entries"));
    }
    let k = (r + OVERSAMPLING).min(kmax);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = Matrix::from_fn(cols, k, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        T::of(z)
    });

    let mut q = orthonormalize_completing(&m.matmul(&omega)?)?.0;
    for _ in 0..POWER_ITERATIONS {
        let z = orthonormalize_completing(&m.t_matmul(&q)?)?.0;
        q = orthonormalize_completing(&m.matmul(&z)?)?.0;
    }
    // Project onto the captured range and decompose the small k x cols matrix.
    let b = q.t_matmul(m)?;
    let small = svd_exact(&b)?;
    let full = SvdTriple {
        u: q.matmul(&small.u)?,
        s: small.s,
        vt: small.vt,
    };
    Ok(full.truncate(r))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
    }

    fn orth_err(q: &Matrix<f64>) -> f64 {
        q.gram().sub(&Matrix::identity(q.cols())).unwrap().frobenius_norm()
    }

    #[test]
    fn identity_decomposes_to_identity() {
        let svd = svd_exact(&Matrix::<f64>::identity(2)).unwrap();
        assert_eq!(svd.s, vec![1.0, 1.0]);
        assert_eq!(svd.u, Matrix::identity(2));
        assert_eq!(svd.vt, Matrix::identity(2));
    }

    #[test]
    fn rank_deficient_diagonal() {
        let svd = svd_exact(&Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 0.0]])).unwrap();
        assert_eq!(svd.s, vec![3.0, 0.0]);
        assert!(orth_err(&svd.u) < 1e-14);
        assert!(orth_err(&svd.vt.transpose()) < 1e-14);
    }

    #[test]
    fn anti_diagonal_singular_values() {
        let a = Matrix::from_rows(&[&[0.0f64, 2.0], &[1.0, 0.0]]);
        let svd = svd_exact(&a).unwrap();
        assert!((svd.s[0] - 2.0).abs() < 1e-15 && (svd.s[1] - 1.0).abs() < 1e-15);
        assert!(rel_err(&svd.reconstruct(), &a) < 1e-15);
    }

    #[test]
    fn wide_input_goes_through_transpose() {
        let a = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.5]]);
        let svd = svd_exact(&a).unwrap();
        assert_eq!(svd.u.shape(), (2, 2));
        assert_eq!(svd.vt.shape(), (2, 3));
        assert!(rel_err(&svd.reconstruct(), &a) < 1e-14);
    }

    #[test]
    fn zero_matrix_has_orthonormal_factors() {
        let svd = svd_exact(&Matrix::<f64>::zeros(3, 2)).unwrap();
        assert_eq!(svd.s, vec![0.0, 0.0]);
        assert!(orth_err(&svd.u) < 1e-14);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let a = Matrix::from_rows(&[&[f64::NAN]]);
        assert!(svd_exact(&a).is_err());
    }

    #[test]
    fn randomized_rank_bounds() {
        let a = Matrix::<f64>::identity(3);
        assert!(matches!(svd_truncated_randomized(&a, 0, 1), Err(Error::Argument(_))));
        assert!(matches!(svd_truncated_randomized(&a, 4, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn randomized_identity() {
        let svd = svd_truncated_randomized(&Matrix::<f64>::identity(4), 4, 3).unwrap();
        for s in &svd.s {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn randomized_is_deterministic_per_seed() {
        let a = Matrix::from_fn(7, 5, |i, j| ((i * 5 + j) as f64).sin());
        let x = svd_truncated_randomized(&a, 3, 42).unwrap();
        let y = svd_truncated_randomized(&a, 3, 42).unwrap();
        assert_eq!(x, y);
    }
}
