//! Independent reference code for the integration tests: random matrices,
//! Gram-Schmidt, a Jacobi eigensolver and brute-force principal angles.
//! Deliberately shares nothing with the library's numerics.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ssa_core::numerics::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Modified Gram-Schmidt with two passes; panics on dependent columns.
pub fn gram_schmidt(a: &Matrix<f64>) -> Matrix<f64> {
    let (m, n) = a.shape();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v = a.column(j);
        for _ in 0..2 {
            for qk in &q {
                let d: f64 = qk.iter().zip(&v).map(|(x, y)| x * y).sum();
                for (vi, qi) in v.iter_mut().zip(qk) {
                    *vi -= d * qi;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 1e-10, "dependent columns");
        q.push(v.into_iter().map(|x| x / norm).collect());
    }
    Matrix::from_fn(m, n, |i, j| q[j][i])
}

pub fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    gram_schmidt(&gaussian(rows, cols, rng))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
#[allow(clippy::needless_range_loop)]
pub fn symmetric_eigenvalues(a: &Matrix<f64>) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-32 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

/// Principal angles in degrees between `col(a)` and `col(b)` (equal widths),
/// ascending. Cosines come from the eigenvalues of `M^T M` with
/// `M = Q_a^T Q_b`, sines from the residual `Q_b - Q_a M`, and each angle is
/// `atan2(sin, cos)`.
pub fn brute_force_angles(a: &Matrix<f64>, b: &Matrix<f64>) -> Vec<f64> {
    let qa = gram_schmidt(a);
    let qb = gram_schmidt(b);
    let m = qa.t_matmul(&qb).unwrap();
    let cos2 = symmetric_eigenvalues(&m.t_matmul(&m).unwrap());
    let resid = qb.sub(&qa.matmul(&m).unwrap()).unwrap();
    let sin2 = symmetric_eigenvalues(&resid.t_matmul(&resid).unwrap());
    let k = cos2.len();
    // Largest cosine pairs with the smallest sine.
    (0..k)
        .map(|i| {
            let c = cos2[k - 1 - i].max(0.0).sqrt();
            let s = sin2[i].max(0.0).sqrt();
            s.atan2(c).to_degrees()
        })
        .collect()
}

/// Relative Frobenius distance `|a - b| / |b|`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

/// Central difference of `f` at every entry of `x`.
pub fn central_diff(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let fp = f(x);
            x[i] = orig - h;
            let fm = f(x);
            x[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Prints the acceptance verdict line before asserting.
pub fn verdict(criterion: &str, ok: bool, detail: impl std::fmt::Display) {
    println!("{} criterion {criterion}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {criterion} failed: {detail}");
}
