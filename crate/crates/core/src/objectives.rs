//! Loss terms of the layer-local objective.

use crate::error::{Error, Result};
use crate::model::FactoredWeight;
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// Coefficients of the local objective
/// `alpha * ce + beta * align + gamma * ortho`, plus the weight of the
/// sparsity term used during rank reduction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_hoyer: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1e-3,
            gamma: 1e-4,
            lambda_hoyer: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda_hoyer", self.lambda_hoyer),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy over the batch and the per-sample output
/// error `softmax(logits) - one_hot(label)`.
pub fn ce_loss_and_delta<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<(T, Matrix<T>)> {
    let (batch, classes) = logits.shape();
    if batch == 0 {
        return Err(Error::arg("cross-entropy of an empty batch"));
    }
    if labels.len() != batch {
        return Err(Error::arg(format!("{} labels for {} logit rows", labels.len(), batch)));
    }
    let mut delta = Matrix::zeros(batch, classes);
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::arg(format!("label {label} outside 0..{classes}")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        total += sum.ln() + max - row[label];
        for (d, e) in delta.row_mut(i).iter_mut().zip(&exps) {
            *d = *e / sum;
        }
        delta[(i, label)] -= T::one();
    }
    Ok((total / T::of(batch as f64), delta))
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    correct as f64 / labels.len() as f64
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// `|U - B_U|_F^2 + |s - B_S|^2 + |V^T - B_V^T|_F^2`.
pub fn alignment_loss<T: Scalar>(fw: &FactoredWeight<T>, bu: &Matrix<T>, bs: &[T], bvt: &Matrix<T>) -> Result<T> {
    if fw.s.len() != bs.len() {
        return Err(Error::arg("alignment targets have a different rank"));
    }
    let du = fw.u.sub(bu)?.frobenius_norm();
    let dv = fw.vt.sub(bvt)?.frobenius_norm();
    let ds: T = fw.s.iter().zip(bs).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(du * du + ds + dv * dv)
}

/// `|U^T U - I|_F^2 + |V^T V - I|_F^2`, with `V^T V` the Gram matrix of
/// the rows of `vt`.
pub fn ortho_loss<T: Scalar>(u: &Matrix<T>, vt: &Matrix<T>) -> T {
    let gu = u
        .gram()
        .sub(&Matrix::identity(u.cols()))
        .expect("square")
        .frobenius_norm();
    let gv = vt
        .row_gram()
        .sub(&Matrix::identity(vt.rows()))
        .expect("square")
        .frobenius_norm();
    gu * gu + gv * gv
}

/// `|s|_1 / |s|_2`.
pub fn hoyer<T: Scalar>(s: &[T]) -> Result<T> {
    let l2 = s.iter().map(|&x| x * x).sum::<T>().sqrt();
    if l2 == T::zero() {
        return Err(Error::arg("hoyer measure undefined for an all-zero vector"));
    }
    let l1: T = s.iter().map(|x| x.abs()).sum();
    Ok(l1 / l2)
}

/// `d(|s|_1/|s|_2)/ds_i = sign(s_i)/|s|_2 - |s|_1 s_i / |s|_2^3`.
pub fn hoyer_grad<T: Scalar>(s: &[T]) -> Result<Vec<T>> {
    let l2 = s.iter().map(|&x| x * x).sum::<T>().sqrt();
    if l2 == T::zero() {
        return Err(Error::arg("hoyer measure undefined for an all-zero vector"));
    }
    let l1: T = s.iter().map(|x| x.abs()).sum();
    let l2_3 = l2 * l2 * l2;
    Ok(s.iter()
        .map(|&x| {
            let sign = if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            sign / l2 - l1 * x / l2_3
        })
        .collect())
}

pub fn composite_local_loss(weights: &LossWeights, ce: f64, align: f64, ortho: f64) -> f64 {
    weights.alpha * ce + weights.beta * align + weights.gamma * ortho
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let (loss, delta) = ce_loss_and_delta(&Matrix::from_rows(&[&[0.0, 0.0]]), &[0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(delta, Matrix::from_rows(&[&[-0.5, 0.5]]));
    }

    #[test]
    fn confident_logits_have_tiny_delta() {
        let (_, delta) = ce_loss_and_delta(&Matrix::from_rows(&[&[20.0, 0.0]]), &[0]).unwrap();
        assert!(delta.frobenius_norm() < 1e-8);
    }

    #[test]
    fn ce_errors() {
        let empty = Matrix::<f64>::zeros(0, 3);
        assert!(ce_loss_and_delta(&empty, &[]).is_err());
        assert!(ce_loss_and_delta(&Matrix::<f64>::zeros(1, 3), &[3]).is_err());
    }

    #[test]
    fn hoyer_values() {
        assert_eq!(hoyer(&[3.0f64, 4.0]).unwrap(), 1.4);
        assert_eq!(hoyer(&[0.0f64, 2.5, 0.0]).unwrap(), 1.0);
        assert!((hoyer(&[0.7f64; 9]).unwrap() - 3.0).abs() < 1e-15);
        assert!(hoyer::<f64>(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn ortho_of_scaled_identity() {
        let m = 4;
        let u = Matrix::<f64>::identity(m).scale(2.0);
        let vt = Matrix::identity(3);
        assert_eq!(ortho_loss(&u, &vt), 9.0 * m as f64);
    }

    #[test]
    fn alignment_of_shifted_u() {
        let u = Matrix::<f64>::identity(2);
        let fw = FactoredWeight::new(u.clone(), vec![1.0, 1.0], u.clone()).unwrap();
        let bu = u.sub(&Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 0.0]])).unwrap();
        assert_eq!(alignment_loss(&fw, &bu, &[1.0, 1.0], &u).unwrap(), 4.0);
        assert_eq!(alignment_loss(&fw, &u, &[1.0, 1.0], &u).unwrap(), 0.0);
    }

    #[test]
    fn composite_arithmetic() {
        let w = LossWeights {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.1,
            lambda_hoyer: 0.0,
        };
        assert!((composite_local_loss(&w, 2.0, 4.0, 10.0) - 5.0).abs() < 1e-15);
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            lambda_hoyer: 0.0,
        };
        assert_eq!(composite_local_loss(&zero, 2.0, 4.0, 10.0), 0.0);
    }
}
