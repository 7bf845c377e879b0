//! Gradient rules: exact backpropagation, the DFA pseudo-gradient, factor
//! gradients on the Stiefel manifold and sign-concordant feedback.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::feedback::AlignmentTargets;
use crate::model::{clamp_to_floor, FactoredWeight, Layer, LayerTape, Network, SIGMA_FLOOR};
use crate::numerics::{tangent_project, Matrix};
use crate::objectives::LossWeights;
use crate::scalar::Scalar;

/// Gradient of a layer's weight matrix and (for the classifier) its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T> {
    pub w: Matrix<T>,
    pub bias: Option<Vec<T>>,
}

/// Gradients with respect to the three SVD factors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGrads<T> {
    pub gu: Matrix<T>,
    pub gs: Vec<T>,
    pub gvt: Matrix<T>,
    /// Singular values that sat below the floor and were clamped for the
    /// inversion.
    pub clamped: usize,
}

impl<T: Scalar> FactorGrads<T> {
    /// The induced first-order change of `W = U diag(s) V^T`:
    /// `gU S V^T + U diag(gS) V^T + U S gVt`.
    pub fn weight_direction(&self, fw: &FactoredWeight<T>) -> Result<Matrix<T>> {
        let a = self.gu.scale_columns(&fw.s)?.matmul(&fw.vt)?;
        let b = fw.u.scale_columns(&self.gs)?.matmul(&fw.vt)?;
        let c = fw.u.scale_columns(&fw.s)?.matmul(&self.gvt)?;
        a.add(&b)?.add(&c)
    }
}

fn mean_rows<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    let inv = T::one() / T::of(m.rows() as f64);
    (0..m.cols())
        .map(|j| (0..m.rows()).map(|i| m[(i, j)]).sum::<T>() * inv)
        .collect()
}

fn times_derivative<T: Scalar>(layer: &Layer<T>, e: &Matrix<T>, tape: &LayerTape<T>) -> Result<Matrix<T>> {
    let act = layer.activation;
    e.zip_with(&tape.pre_activation, "error x f'(a)", |d, a| d * act.derivative(a))
}

/// Mean over the batch of `(e_i * f'(a_i)) h_{i-1}^T`, the feedback
/// pseudo-gradient of the loss with respect to the full weight matrix.
pub fn pseudo_grad_w<T: Scalar>(layer: &Layer<T>, e_i: &Matrix<T>, tape: &LayerTape<T>) -> Result<LayerGrad<T>> {
    if e_i.shape() != tape.pre_activation.shape() {
        return Err(Error::arg(format!(
            "projected error is {:?} but the layer output is {:?}",
            e_i.shape(),
            tape.pre_activation.shape()
        )));
    }
    let delta = times_derivative(layer, e_i, tape)?;
    Ok(LayerGrad {
        w: layer.weight_grad(&delta, &tape.input)?,
        bias: layer.bias.as_ref().map(|_| mean_rows(&delta)),
    })
}

/// Backward recursion from the output error. `feedback(i)` may substitute
/// the matrix used in place of layer `i`'s weight when passing the error to
/// layer `i - 1`; `None` gives exact backpropagation. Factored layers report
/// the gradient with respect to the reconstructed weight.
pub fn backward_with<T: Scalar>(
    net: &Network<T>,
    tapes: &[LayerTape<T>],
    delta_n: &Matrix<T>,
    mut feedback: impl FnMut(usize, &Layer<T>) -> Result<Option<Matrix<T>>>,
) -> Result<Vec<Option<LayerGrad<T>>>> {
    if tapes.len() != net.layers.len() {
        return Err(Error::arg("tape count differs from layer count"));
    }
    let mut grads = vec![None; net.layers.len()];
    let mut delta_h = delta_n.clone();
    for i in (0..net.layers.len()).rev() {
        let layer = &net.layers[i];
        let tape = &tapes[i];
        if delta_h.shape() != tape.pre_activation.shape() {
            return Err(Error::arg(format!("error shape mismatch at layer {i}")));
        }
        let delta_a = times_derivative(layer, &delta_h, tape)?;
        if layer.is_parametric() {
            grads[i] = Some(LayerGrad {
                w: layer.weight_grad(&delta_a, &tape.input)?,
                bias: layer.bias.as_ref().map(|_| mean_rows(&delta_a)),
            });
        }
        if i > 0 {
            let over = if layer.is_parametric() {
                feedback(i, layer)?
            } else {
                None
            };
            delta_h = layer.backprop_input(&delta_a, &tape.input, over.as_ref())?;
        }
    }
    Ok(grads)
}

/// Exact chain-rule gradients of the mean loss for every parametric layer.
pub fn bp_backward<T: Scalar>(
    net: &Network<T>,
    tapes: &[LayerTape<T>],
    delta_n: &Matrix<T>,
) -> Result<Vec<Option<LayerGrad<T>>>> {
    backward_with(net, tapes, delta_n, |_, _| Ok(None))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignFeedback {
    /// `sign(W^T)`.
    Unit,
    /// `|R| * sign(W^T)` with `|R|` drawn from `|N(0,1)|`.
    BatchRandom,
}

/// Sign-concordant feedback for a weight `w` (`m x n`), returned as `n x m`
/// like `W^T`. `sign(0) = 0`.
pub fn variant_feedback<T: Scalar>(w: &Matrix<T>, kind: SignFeedback, seed: u64) -> Matrix<T> {
    let sign = |x: T| {
        if x > T::zero() {
            T::one()
        } else if x < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    };
    let wt = w.transpose();
    match kind {
        SignFeedback::Unit => wt.map(sign),
        SignFeedback::BatchRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = wt.map(sign);
            for v in out.as_mut_slice() {
                let r: f64 = StandardNormal.sample(&mut rng);
                *v *= T::of(r.abs());
            }
            out
        }
    }
}

/// Factor gradients before the tangent-space projection:
///
/// * `gS = alpha * diag(U^T G V) + 2 beta (s - B_S)`
/// * `gU = alpha * G V S^-1 + 2 beta (U - B_U) + 4 gamma U (U^T U - I)`
/// * `gV = alpha * G^T U S^-1 + 2 beta (V - B_V) + 4 gamma V (V^T V - I)`,
///   returned transposed as `gVt`.
///
/// `S^-1` uses singular values clamped to the floor.
pub fn ssa_factor_grads_unprojected<T: Scalar>(
    fw: &FactoredWeight<T>,
    grad_w: &Matrix<T>,
    targets: &AlignmentTargets<T>,
    weights: &LossWeights,
) -> Result<FactorGrads<T>> {
    let r = fw.rank();
    if grad_w.shape() != fw.dims() {
        return Err(Error::arg(format!(
            "weight gradient is {:?} but the layer is {:?}",
            grad_w.shape(),
            fw.dims()
        )));
    }
    if targets.rank() != r || targets.bu.shape() != fw.u.shape() || targets.bvt.shape() != fw.vt.shape() {
        return Err(Error::arg("alignment targets do not match the factor shapes"));
    }
    let alpha = T::of(weights.alpha);
    let two_beta = T::of(2.0 * weights.beta);
    let four_gamma = T::of(4.0 * weights.gamma);

    let mut s_safe = fw.s.clone();
    let clamped = clamp_to_floor(&mut s_safe);
    let s_inv: Vec<T> = s_safe.iter().map(|&x| T::one() / x).collect();

    // G V (m x r) and G^T U (n x r).
    let gv = grad_w.matmul_t(&fw.vt)?;
    let gtu = grad_w.t_matmul(&fw.u)?;

    let gs: Vec<T> = (0..r)
        .map(|k| {
            let d: T = (0..fw.u.rows()).map(|i| fw.u[(i, k)] * gv[(i, k)]).sum();
            alpha * d + two_beta * (fw.s[k] - targets.bs[k])
        })
        .collect();

    let v = fw.vt.transpose();
    let bv = targets.bvt.transpose();
    let side = |basis: &Matrix<T>, target: &Matrix<T>, ce: &Matrix<T>| -> Result<Matrix<T>> {
        let mut g = ce.scale_columns(&s_inv)?.scale(alpha);
        g.axpy(two_beta, &basis.sub(target)?)?;
        let drift = basis.gram().sub(&Matrix::identity(r))?;
        g.axpy(four_gamma, &basis.matmul(&drift)?)?;
        Ok(g)
    };
    let gu = side(&fw.u, &targets.bu, &gv)?;
    let gvm = side(&v, &bv, &gtu)?;
    Ok(FactorGrads {
        gu,
        gs,
        gvt: gvm.transpose(),
        clamped,
    })
}

/// Factor gradients with `gU` projected by `I - U U^T` and `gVt` by the
/// corresponding right-side projection `I - V V^T`.
pub fn ssa_factor_grads<T: Scalar>(
    fw: &FactoredWeight<T>,
    grad_w: &Matrix<T>,
    targets: &AlignmentTargets<T>,
    weights: &LossWeights,
) -> Result<FactorGrads<T>> {
    let raw = ssa_factor_grads_unprojected(fw, grad_w, targets, weights)?;
    let v = fw.vt.transpose();
    let gu = tangent_project(&fw.u, &raw.gu)?;
    let gv = tangent_project(&v, &raw.gvt.transpose())?;
    Ok(FactorGrads {
        gu,
        gs: raw.gs,
        gvt: gv.transpose(),
        clamped: raw.clamped,
    })
}

/// Chain rule from `dL/dW` onto `W = U diag(s) V^T` without projections.
pub fn chain_to_factors<T: Scalar>(fw: &FactoredWeight<T>, grad_w: &Matrix<T>) -> Result<FactorGrads<T>> {
    if grad_w.shape() != fw.dims() {
        return Err(Error::arg("weight gradient shape differs from the layer"));
    }
    let gv = grad_w.matmul_t(&fw.vt)?;
    let gu = gv.scale_columns(&fw.s)?;
    let gs = (0..fw.rank())
        .map(|k| (0..fw.u.rows()).map(|i| fw.u[(i, k)] * gv[(i, k)]).sum())
        .collect();
    let gvt = fw.u.t_matmul(grad_w)?.scale_rows(&fw.s)?;
    Ok(FactorGrads {
        gu,
        gs,
        gvt,
        clamped: 0,
    })
}

/// Whether any singular value lies below the floor used for inversion.
pub fn below_floor<T: Scalar>(s: &[T]) -> bool {
    s.iter().any(|&x| x < T::of(SIGMA_FLOOR))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LayerKind, Weight};
    use crate::numerics::svd_exact;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn usf_and_brsf_signs() {
        let w = Matrix::from_rows(&[&[2.0f64, -3.0]]);
        assert_eq!(
            variant_feedback(&w, SignFeedback::Unit, 0),
            Matrix::from_rows(&[&[1.0], &[-1.0]])
        );
        assert_eq!(
            variant_feedback(&Matrix::<f64>::zeros(2, 3), SignFeedback::Unit, 0),
            Matrix::zeros(3, 2)
        );
        let w = random(4, 5, 3);
        for seed in 0..5 {
            let b = variant_feedback(&w, SignFeedback::BatchRandom, seed);
            let s = variant_feedback(&w, SignFeedback::Unit, 0);
            for (x, y) in b.as_slice().iter().zip(s.as_slice()) {
                assert_eq!(x.signum(), *y);
            }
        }
    }

    #[test]
    fn identity_factors_give_diagonal_gs() {
        let g = random(3, 3, 1);
        let fw = FactoredWeight::new(Matrix::identity(3), vec![1.0; 3], Matrix::identity(3)).unwrap();
        let targets = AlignmentTargets {
            bu: Matrix::identity(3),
            bs: vec![0.5; 3],
            bvt: Matrix::identity(3),
            order: vec![0, 1, 2],
        };
        let w = LossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            lambda_hoyer: 0.0,
        };
        let fg = ssa_factor_grads(&fw, &g, &targets, &w).unwrap();
        assert_eq!(fg.gs, g.diag());
        assert!(fg.gu.frobenius_norm() < 1e-15);
        assert!(fg.gvt.frobenius_norm() < 1e-15);
    }

    #[test]
    fn stationary_point_has_zero_gradients() {
        let svd = svd_exact(&random(5, 4, 2)).unwrap().truncate(3);
        let fw = FactoredWeight::new(svd.u.clone(), svd.s.clone(), svd.vt.clone()).unwrap();
        let targets = AlignmentTargets {
            bu: svd.u,
            bs: svd.s,
            bvt: svd.vt,
            order: vec![0, 1, 2],
        };
        let fg = ssa_factor_grads(&fw, &Matrix::zeros(5, 4), &targets, &LossWeights::default()).unwrap();
        assert!(fg.gu.frobenius_norm() < 1e-12);
        assert!(fg.gvt.frobenius_norm() < 1e-12);
        assert!(fg.gs.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn chain_rule_direction_matches_linearization() {
        let svd = svd_exact(&random(4, 3, 5)).unwrap();
        let fw = FactoredWeight::new(svd.u, svd.s, svd.vt).unwrap();
        let g = random(4, 3, 6);
        let fg = chain_to_factors(&fw, &g).unwrap();
        // <G, dW> equals the sum of factor-gradient inner products.
        let lhs = fg.gu.frobenius_dot(&fg.gu).unwrap()
            + fg.gs.iter().map(|x| x * x).sum::<f64>()
            + fg.gvt.frobenius_dot(&fg.gvt).unwrap();
        let rhs = g.frobenius_dot(&fg.weight_direction(&fw).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn single_linear_layer_bp_is_outer_product() {
        let w = random(2, 3, 7);
        let layer = Layer {
            kind: LayerKind::Dense(Weight::Full(w)),
            activation: Activation::Identity,
            bias: None,
        };
        let net = Network::from_layers(crate::model::InputShape::Flat(3), vec![layer]).unwrap();
        let x = Matrix::from_rows(&[&[1.0, 2.0, -1.0]]);
        let (_, tapes) = net.forward(&x).unwrap();
        let d = Matrix::from_rows(&[&[0.5, -2.0]]);
        let g = bp_backward(&net, &tapes, &d).unwrap();
        assert_eq!(g[0].as_ref().unwrap().w, d.t_matmul(&x).unwrap());
        let zero = bp_backward(&net, &tapes, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(zero[0].as_ref().unwrap().w, Matrix::zeros(2, 3));
    }
}
