//! Fixed random feedback: the matrices that carry the output error to each
//! layer, and SVD-shaped alignment targets for the factored weights.
//!
//! The error-projection matrix `B` is `d_i x d_N` and is used only to
//! project the output error. The alignment targets `(B_U, B_S, B_V^T)` come
//! from the truncated randomized SVD of a separate Gaussian matrix with the
//! layer's own `m x n` shape, so that every alignment term compares factors
//! of equal size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{svd_truncated_randomized, Matrix};
use crate::scalar::Scalar;

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) const TAG_PROJECTION: u64 = 1;
pub(crate) const TAG_TARGET: u64 = 2;
const TAG_TARGET_SKETCH: u64 = 3;

/// Gaussian `rows x cols` matrix with entries `N(0, sigma^2)`, each column
/// scaled to unit Euclidean norm. Sampled in `f64` and cast, so every
/// precision sees the same values.
fn normalized_gaussian<T: Scalar>(rows: usize, cols: usize, sigma: f64, seed: u64) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Matrix::<f64>::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        sigma * z
    });
    let norms: Vec<f64> = (0..cols)
        .map(|j| raw.column(j).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    Matrix::from_fn(rows, cols, |i, j| {
        let n = norms[j];
        T::of(if n > 0.0 { raw[(i, j)] / n } else { 0.0 })
    })
}

/// Error-projection matrix `B` (`d_i x d_n`) with unit-norm columns.
pub fn build_feedback<T: Scalar>(d_i: usize, d_n: usize, sigma: f64, seed: u64) -> Result<Matrix<T>> {
    if d_i == 0 || d_n == 0 {
        return Err(Error::arg("feedback dimensions must be positive"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::arg("feedback sigma must be positive"));
    }
    Ok(normalized_gaussian(d_i, d_n, sigma, seed))
}

/// Alignment targets `(B_U, B_S, B_V^T)` of shapes `m x r`, `r`, `r x n`.
pub fn build_alignment_targets<T: Scalar>(
    m: usize,
    n: usize,
    r: usize,
    sigma: f64,
    seed: u64,
) -> Result<(Matrix<T>, Vec<T>, Matrix<T>)> {
    if r == 0 || r > m.min(n) {
        return Err(Error::arg(format!("target rank {r} outside 1..={}", m.min(n))));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::arg("target sigma must be positive"));
    }
    let aux: Matrix<f64> = normalized_gaussian(m, n, sigma, seed);
    let svd = svd_truncated_randomized(&aux, r, mix_seed(seed, TAG_TARGET_SKETCH, 0))?;
    Ok((svd.u.cast(), svd.s.iter().map(|&x| T::of(x)).collect(), svd.vt.cast()))
}

/// `delta_n B^T`: each row of `delta_n` (length `d_N`) mapped to `d_i`.
pub fn project_error<T: Scalar>(b: &Matrix<T>, delta_n: &Matrix<T>) -> Result<Matrix<T>> {
    if delta_n.cols() != b.cols() {
        return Err(Error::arg(format!(
            "output error has {} columns but feedback expects {}",
            delta_n.cols(),
            b.cols()
        )));
    }
    delta_n.matmul_t(b)
}

/// Run-level feedback settings; `None` sigmas select `1/sqrt(d_N)` for the
/// projection and `1/sqrt(n)` for the targets.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeedbackParams {
    pub seed: u64,
    pub projection_sigma: Option<f64>,
    pub target_sigma: Option<f64>,
}

/// How a bundle was generated, so it can be rebuilt instead of stored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackSource {
    pub seed: u64,
    pub projection_sigma: f64,
    pub target_sigma: f64,
    /// Output layers receive the output error unchanged (`B = I`).
    pub identity_projection: bool,
    /// Target rank at construction.
    pub initial_rank: usize,
}

/// Feedback for one layer. Never modified by training; rank truncation
/// only selects retained components.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackBundle<T> {
    /// `d_i x d_N` error projection.
    pub b: Matrix<T>,
    /// Alignment targets, present for factored layers.
    pub targets: Option<AlignmentTargets<T>>,
    pub source: FeedbackSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTargets<T> {
    pub bu: Matrix<T>,
    pub bs: Vec<T>,
    pub bvt: Matrix<T>,
    /// Original component index of each retained target component.
    pub order: Vec<usize>,
}

impl<T: Scalar> AlignmentTargets<T> {
    pub fn rank(&self) -> usize {
        self.bs.len()
    }

    /// Keeps components `keep` (indices into the current ordering).
    pub fn select(&self, keep: &[usize]) -> Self {
        AlignmentTargets {
            bu: self.bu.select_columns(keep),
            bs: keep.iter().map(|&k| self.bs[k]).collect(),
            bvt: self.bvt.select_rows(keep),
            order: keep.iter().map(|&k| self.order[k]).collect(),
        }
    }
}

impl<T: Scalar> FeedbackBundle<T> {
    /// Builds the bundle for layer `index`.
    ///
    /// * `out_dim` is the layer's flattened output size `d_i`.
    /// * `weight_dims` is the shape `m x n` of the layer's weight matrix
    ///   (`K'` for convolutions); targets are built when `rank` is given.
    pub fn build(
        index: usize,
        out_dim: usize,
        d_n: usize,
        weight_dims: (usize, usize),
        rank: Option<usize>,
        is_output: bool,
        params: &FeedbackParams,
    ) -> Result<Self> {
        let projection_sigma = params.projection_sigma.unwrap_or(1.0 / (d_n as f64).sqrt());
        let target_sigma = params.target_sigma.unwrap_or(1.0 / (weight_dims.1 as f64).sqrt());
        let source = FeedbackSource {
            seed: mix_seed(params.seed, index as u64, 0),
            projection_sigma,
            target_sigma,
            identity_projection: is_output,
            initial_rank: rank.unwrap_or(0),
        };
        Self::from_source(out_dim, d_n, weight_dims, source)
    }

    /// Regenerates a bundle from its source description at full initial rank.
    pub fn from_source(
        out_dim: usize,
        d_n: usize,
        weight_dims: (usize, usize),
        source: FeedbackSource,
    ) -> Result<Self> {
        let b = if source.identity_projection {
            if out_dim != d_n {
                return Err(Error::arg("identity feedback requires d_i = d_N"));
            }
            Matrix::identity(d_n)
        } else {
            build_feedback(
                out_dim,
                d_n,
                source.projection_sigma,
                mix_seed(source.seed, TAG_PROJECTION, 0),
            )?
        };
        let targets = if source.initial_rank > 0 {
            let (m, n) = weight_dims;
            let (bu, bs, bvt) = build_alignment_targets(
                m,
                n,
                source.initial_rank,
                source.target_sigma,
                mix_seed(source.seed, TAG_TARGET, 0),
            )?;
            Some(AlignmentTargets {
                bu,
                bs,
                bvt,
                order: (0..source.initial_rank).collect(),
            })
        } else {
            None
        };
        Ok(FeedbackBundle { b, targets, source })
    }

    pub fn cast<U: Scalar>(&self) -> FeedbackBundle<U> {
        FeedbackBundle {
            b: self.b.cast(),
            targets: self.targets.as_ref().map(|t| AlignmentTargets {
                bu: t.bu.cast(),
                bs: t.bs.iter().map(|&x| U::of(x.as_f64())).collect(),
                bvt: t.bvt.cast(),
                order: t.order.clone(),
            }),
            source: self.source,
        }
    }

    /// Per-layer error signal `e_i = B delta_N` for a batch.
    pub fn project(&self, delta_n: &Matrix<T>) -> Result<Matrix<T>> {
        if self.source.identity_projection {
            if delta_n.cols() != self.b.cols() {
                return Err(Error::arg("output error width mismatch"));
            }
            return Ok(delta_n.clone());
        }
        project_error(&self.b, delta_n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_have_unit_norm() {
        let b: Matrix<f64> = build_feedback(7, 3, 0.2, 11).unwrap();
        assert_eq!(b.shape(), (7, 3));
        for j in 0..3 {
            let n: f64 = b.column(j).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_matrix() {
        let a: Matrix<f32> = build_feedback(4, 2, 1.0, 5).unwrap();
        let b: Matrix<f32> = build_feedback(4, 2, 1.0, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (4, 2));
    }

    #[test]
    fn target_shapes_and_ordering() {
        let (bu, bs, bvt) = build_alignment_targets::<f64>(6, 5, 3, 0.5, 9).unwrap();
        assert_eq!(bu.shape(), (6, 3));
        assert_eq!(bvt.shape(), (3, 5));
        assert_eq!(bs.len(), 3);
        assert!(bs.windows(2).all(|w| w[0] >= w[1]) && bs.iter().all(|&s| s >= 0.0));
        assert!(build_alignment_targets::<f64>(6, 5, 6, 0.5, 9).is_err());
    }

    #[test]
    fn projection_cases() {
        let b = Matrix::<f64>::identity(3);
        let d = Matrix::from_rows(&[&[1.0, -2.0, 0.5]]);
        assert_eq!(project_error(&b, &d).unwrap(), d);
        let zero = Matrix::zeros(2, 3);
        let rb: Matrix<f64> = build_feedback(5, 3, 1.0, 1).unwrap();
        assert_eq!(project_error(&rb, &zero).unwrap(), Matrix::zeros(2, 5));
        assert!(project_error(&rb, &Matrix::zeros(1, 4)).is_err());
    }
}
