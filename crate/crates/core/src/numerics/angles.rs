//! Principal angles between column spaces.

use crate::error::Result;
use crate::numerics::matrix::Matrix;
use crate::numerics::qr::orthonormalize;
use crate::numerics::svd::svd_exact;
use crate::scalar::Scalar;

/// Principal angles in degrees between `col(a)` and `col(b)`, in
/// non-decreasing order. Returns `min(cols(a), cols(b))` angles.
///
/// Both inputs are orthonormalized first. Angles whose cosine exceeds
/// `1/sqrt(2)` are taken from the sines (singular values of the part of
/// `Q_b` outside `col(Q_a)`), where `arccos` loses accuracy; the rest come
/// from `arccos` of the clamped singular values of `Q_a^T Q_b`.
pub fn principal_angles<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Vec<T>> {
    if a.rows() != b.rows() {
        return Err(crate::error::Error::arg(format!(
            "principal angles need equal row counts, got {} and {}",
            a.rows(),
            b.rows()
        )));
    }
    let qa = orthonormalize(a)?;
    let qb = orthonormalize(b)?;
    // Angles are symmetric in the arguments; keep the wider basis first so
    // the sine residual below has exactly one singular value per angle.
    let (qa, qb) = if qa.cols() >= qb.cols() { (qa, qb) } else { (qb, qa) };
    let k = qb.cols();

    let cross = qa.t_matmul(&qb)?;
    let cosines = svd_exact(&cross)?.s;

    let residual = qb.sub(&qa.matmul(&cross)?)?;
    let mut sines = svd_exact(&residual)?.s;
    // Largest sine pairs with the largest angle; sort ascending to pair with
    // descending cosines.
    sines.reverse();

    let to_deg = T::of(180.0 / std::f64::consts::PI);
    let half = T::of(0.5);
    let angles = (0..k)
        .map(|i| {
            let c = cosines[i].min(T::one()).max(-T::one());
            let rad = if c * c >= half {
                sines[i].min(T::one()).max(T::zero()).asin()
            } else {
                c.acos()
            };
            rad * to_deg
        })
        .collect();
    Ok(angles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn col(v: &[f64]) -> Matrix<f64> {
        Matrix::new(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn canonical_cases() {
        let e1 = col(&[1.0, 0.0, 0.0]);
        let e2 = col(&[0.0, 1.0, 0.0]);
        let diag = col(&[1.0, 1.0, 0.0]);
        assert!(principal_angles(&e1, &e1).unwrap()[0].abs() < 1e-12);
        assert!((principal_angles(&e1, &e2).unwrap()[0] - 90.0).abs() < 1e-12);
        assert!((principal_angles(&e1, &diag).unwrap()[0] - 45.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_input_is_rejected() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[0.0, 0.0]]);
        let b = Matrix::from_rows(&[&[1.0], &[0.0], &[0.0]]);
        assert!(matches!(principal_angles(&a, &b), Err(Error::Argument(_))));
        assert!(matches!(principal_angles(&b, &a), Err(Error::Argument(_))));
    }

    #[test]
    fn unequal_widths_give_min_count() {
        let a = Matrix::<f64>::identity(4).select_columns(&[0, 1, 2]);
        let b = col(&[0.0, 0.0, 0.0, 1.0]);
        let angles = principal_angles(&a, &b).unwrap();
        assert_eq!(angles.len(), 1);
        assert!((angles[0] - 90.0).abs() < 1e-12);
    }
}
