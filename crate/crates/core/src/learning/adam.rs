//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

/// First and second moment accumulators for one parameter tensor. Shaped
/// like the tensor so rank truncation can slice them the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Matrix<T>,
    pub v: Matrix<T>,
    pub step: u64,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Moments {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
        }
    }

    pub fn select_columns(&self, idx: &[usize]) -> Self {
        Moments {
            m: self.m.select_columns(idx),
            v: self.v.select_columns(idx),
            step: self.step,
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Moments {
            m: self.m.select_rows(idx),
            v: self.v.select_rows(idx),
            step: self.step,
        }
    }
}

/// Accumulators for one weight, laid out like its parameter tensors.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)] // one per layer; boxing buys nothing
pub enum WeightMoments<T> {
    Full(Moments<T>),
    /// `u` is `m x r`, `s` is `1 x r`, `vt` is `r x n`. `ortho_u` and
    /// `ortho_vt` drive the orthogonality restoring step and stay zero for
    /// methods that do not take it.
    Factored {
        u: Moments<T>,
        s: Moments<T>,
        vt: Moments<T>,
        ortho_u: Moments<T>,
        ortho_vt: Moments<T>,
    },
}

impl<T: Scalar> WeightMoments<T> {
    /// Keeps factor components `keep`; no-op for full weights.
    pub fn select_components(&self, keep: &[usize]) -> Self {
        match self {
            WeightMoments::Full(m) => WeightMoments::Full(m.clone()),
            WeightMoments::Factored {
                u,
                s,
                vt,
                ortho_u,
                ortho_vt,
            } => WeightMoments::Factored {
                u: u.select_columns(keep),
                s: s.select_columns(keep),
                vt: vt.select_rows(keep),
                ortho_u: ortho_u.select_columns(keep),
                ortho_vt: ortho_vt.select_rows(keep),
            },
        }
    }
}

/// Optimizer state for one parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMoments<T> {
    pub weight: WeightMoments<T>,
    pub bias: Option<Moments<T>>,
}

/// Advances the accumulators with `grads` and returns the step that Adam
/// would subtract from the parameters.
pub fn adam_direction<T: Scalar>(cfg: &AdamConfig, grads: &[T], moments: &mut Moments<T>) -> Result<Vec<T>> {
    if moments.m.as_slice().len() != grads.len() {
        return Err(Error::arg(format!(
            "adam: {} gradients for {} accumulator entries",
            grads.len(),
            moments.m.as_slice().len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical("non-finite gradient"));
    }
    moments.step += 1;
    let t = moments.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - T::of(cfg.beta1.powi(t));
    let c2 = T::one() - T::of(cfg.beta2.powi(t));
    let lr = T::of(cfg.lr);
    let eps = T::of(cfg.eps);
    let m = moments.m.as_mut_slice();
    let v = moments.v.as_mut_slice();
    let mut step = Vec::with_capacity(grads.len());
    for (i, &g) in grads.iter().enumerate() {
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        step.push(lr * m_hat / (v_hat.sqrt() + eps));
    }
    Ok(step)
}

/// One Adam update of `params` in place.
pub fn adam_update<T: Scalar>(cfg: &AdamConfig, params: &mut [T], grads: &[T], moments: &mut Moments<T>) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::arg(format!(
            "adam: {} parameters, {} gradients",
            params.len(),
            grads.len()
        )));
    }
    let step = adam_direction(cfg, grads, moments)?;
    for (p, d) in params.iter_mut().zip(step) {
        *p -= d;
    }
    Ok(())
}

/// Matrix convenience wrapper around [`adam_update`].
pub fn apply_step<T: Scalar>(
    cfg: &AdamConfig,
    param: &mut Matrix<T>,
    grad: &Matrix<T>,
    moments: &mut Moments<T>,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::arg("adam: gradient shape differs from parameter shape"));
    }
    adam_update(cfg, param.as_mut_slice(), grad.as_slice(), moments)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Matrix::from_rows(&[&[1.0f64, -2.0]]);
        let before = p.clone();
        let mut mo = Moments::zeros(1, 2);
        apply_step(&AdamConfig::default(), &mut p, &Matrix::zeros(1, 2), &mut mo).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut p = Matrix::from_rows(&[&[0.0f64, 0.0, 0.0]]);
        let g = Matrix::from_rows(&[&[3.0, -0.5, 1e-2]]);
        let mut mo = Moments::zeros(1, 3);
        apply_step(&cfg, &mut p, &g, &mut mo).unwrap();
        for (x, gi) in p.as_slice().iter().zip(g.as_slice()) {
            let expected = -0.01 * gi.signum();
            // |g| / (|g| + eps) differs from 1 by at most eps / |g|, plus rounding.
            assert!((x - expected).abs() <= 0.01 * (1e-8 / gi.abs() + 1e-12));
        }
    }

    #[test]
    fn matches_reference_loop_on_quadratic() {
        // f(x) = 0.5 * sum(c_i x_i^2), written out independently of the module.
        let c = [1.0f64, 10.0, 0.1];
        let cfg = AdamConfig::with_lr(0.05);
        let mut p = Matrix::from_rows(&[&[1.0f64, -2.0, 3.0]]);
        let mut mo = Moments::zeros(1, 3);
        let mut x = [1.0f64, -2.0, 3.0];
        let mut m1 = [0.0f64; 3];
        let mut m2 = [0.0f64; 3];
        for t in 1..=100 {
            let g = Matrix::from_fn(1, 3, |_, j| c[j] * p[(0, j)]);
            apply_step(&cfg, &mut p, &g, &mut mo).unwrap();
            for j in 0..3 {
                let gj = c[j] * x[j];
                m1[j] = 0.9 * m1[j] + 0.1 * gj;
                m2[j] = 0.999 * m2[j] + 0.001 * gj * gj;
                let mh = m1[j] / (1.0 - 0.9f64.powi(t));
                let vh = m2[j] / (1.0 - 0.999f64.powi(t));
                x[j] -= 0.05 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for j in 0..3 {
            assert!((p[(0, j)] - x[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_gradient_fails() {
        let mut p = Matrix::from_rows(&[&[0.0f64]]);
        let mut mo = Moments::zeros(1, 1);
        let g = Matrix::from_rows(&[&[f64::INFINITY]]);
        assert!(matches!(
            apply_step(&AdamConfig::default(), &mut p, &g, &mut mo),
            Err(Error::Numerical(_))
        ));
    }
}
