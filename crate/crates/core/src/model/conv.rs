//! Stride-1, "same"-padded convolution, its spatially separable factored
//! form, and 2x2 max pooling.
//!
//! Activations are row-batched: each row of a `batch x (C*H*W)` matrix is
//! one sample in channel-major, row-major order.
//!
//! A kernel `K` of shape `(N, C, H, W)` is associated with the matrix
//! `K'` of shape `(N*W) x (C*H)` by `K'[n*W + w, c*H + h] = K[n, c, h, w]`.
//! Factoring `K' = U diag(s) V^T` gives a vertical convolution `K1` of
//! shape `(r, C, H, 1)` from the rows of `diag(sqrt s) V^T`, followed by a
//! horizontal convolution `K2` of shape `(N, r, 1, W)` from the columns of
//! `U diag(sqrt s)`. The pair reproduces the original convolution exactly
//! at full rank.

use crate::error::{Error, Result};
use crate::model::factored::{decompose_dense, FactoredWeight};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

/// 4-D kernel `(out, in, kh, kw)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel4<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Kernel4<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Self {
        Kernel4 {
            out_channels,
            in_channels,
            kh,
            kw,
            data: vec![T::zero(); out_channels * in_channels * kh * kw],
        }
    }

    pub fn from_fn(shape: (usize, usize, usize, usize), mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let (n, c, h, w) = shape;
        let mut k = Self::zeros(n, c, h, w);
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        *k.at_mut(a, b, y, x) = f(a, b, y, x);
                    }
                }
            }
        }
        k
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.out_channels, self.in_channels, self.kh, self.kw)
    }

    #[inline]
    fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.in_channels + c) * self.kh + y) * self.kw + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        let o = self.offset(n, c, y, x);
        &mut self.data[o]
    }

    /// The `(N*W) x (C*H)` matrix view `K'`.
    pub fn to_matrix(&self) -> Matrix<T> {
        let (n, c, h, w) = self.shape();
        Matrix::from_fn(n * w, c * h, |row, col| self.at(row / w, col / h, col % h, row % w))
    }

    /// Inverse of [`Kernel4::to_matrix`].
    pub fn from_matrix(k: &Matrix<T>, shape: (usize, usize, usize, usize)) -> Result<Self> {
        let (n, c, h, w) = shape;
        if k.shape() != (n * w, c * h) {
            return Err(Error::arg(format!(
                "kernel matrix {}x{} does not match kernel shape {:?}",
                k.rows(),
                k.cols(),
                shape
            )));
        }
        Ok(Self::from_fn(shape, |a, b, y, x| k[(a * w + x, b * h + y)]))
    }
}

/// Geometry of a convolution layer on `height x width` feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeometry {
    pub fn kernel_shape(&self) -> (usize, usize, usize, usize) {
        (self.out_channels, self.in_channels, self.kh, self.kw)
    }

    /// Shape of `K'`.
    pub fn matrix_shape(&self) -> (usize, usize) {
        (self.out_channels * self.kw, self.in_channels * self.kh)
    }

    pub fn in_dim(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_dim(&self) -> usize {
        self.out_channels * self.height * self.width
    }
}

/// The factored pair `(K1, K2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvPair<T> {
    /// `(r, C, H, 1)`.
    pub k1: Kernel4<T>,
    /// `(N, r, 1, W)`.
    pub k2: Kernel4<T>,
    pub rank: usize,
}

impl<T: Scalar> ConvPair<T> {
    /// Splits the factors of `K'` into the two kernels.
    pub fn from_factors(fw: &FactoredWeight<T>, geom: &ConvGeometry) -> Result<Self> {
        if fw.dims() != geom.matrix_shape() {
            return Err(Error::arg("factored kernel does not match convolution geometry"));
        }
        let r = fw.rank();
        let (n, c, h, w) = geom.kernel_shape();
        let root: Vec<T> = fw.s.iter().map(|x| x.sqrt()).collect();
        let k1 = Kernel4::from_fn((r, c, h, 1), |k, ch, y, _| root[k] * fw.vt[(k, ch * h + y)]);
        let k2 = Kernel4::from_fn((n, r, 1, w), |o, k, _, x| fw.u[(o * w + x, k)] * root[k]);
        Ok(ConvPair { k1, k2, rank: r })
    }

    /// `K2 * (K1 * x)` on a batch of `height x width` maps.
    pub fn apply(&self, x: &Matrix<T>, height: usize, width: usize) -> Result<Matrix<T>> {
        let mid = conv2d_same(x, &self.k1, height, width)?;
        conv2d_same(&mid, &self.k2, height, width)
    }
}

/// Factors a kernel at rank `r` via the SVD of `K'`.
pub fn decompose_conv<T: Scalar>(kernel: &Kernel4<T>, r: usize) -> Result<ConvPair<T>> {
    let (n, c, h, w) = kernel.shape();
    let kmax = (n * w).min(c * h);
    if r == 0 || r > kmax {
        return Err(Error::arg(format!("conv rank {r} outside 1..={kmax}")));
    }
    let fw = decompose_dense(&kernel.to_matrix(), r)?;
    let geom = ConvGeometry {
        in_channels: c,
        out_channels: n,
        kh: h,
        kw: w,
        height: 1,
        width: 1,
    };
    ConvPair::from_factors(&fw, &geom)
}

/// Range of output coordinates `y` for which `y + d - pad` is inside `0..len`.
#[inline]
fn valid_range(len: usize, d: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d);
    let hi = (len + pad).saturating_sub(d).min(len);
    (lo, hi.max(lo))
}

fn check_conv_input<T: Scalar>(x: &Matrix<T>, channels: usize, height: usize, width: usize) -> Result<()> {
    if x.cols() != channels * height * width {
        return Err(Error::arg(format!(
            "conv input has {} features, expected {}x{}x{}",
            x.cols(),
            channels,
            height,
            width
        )));
    }
    Ok(())
}

/// Stride-1 convolution (cross-correlation) with zero "same" padding of
/// `(kh-1)/2` rows and `(kw-1)/2` columns.
pub fn conv2d_same<T: Scalar>(x: &Matrix<T>, k: &Kernel4<T>, height: usize, width: usize) -> Result<Matrix<T>> {
    let (n_out, c_in, kh, kw) = k.shape();
    check_conv_input(x, c_in, height, width)?;
    let hw = height * width;
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut out = Matrix::zeros(x.rows(), n_out * hw);
    for b in 0..x.rows() {
        let xin = x.row(b);
        let yout = out.row_mut(b);
        for n in 0..n_out {
            let oplane = &mut yout[n * hw..(n + 1) * hw];
            for c in 0..c_in {
                let iplane = &xin[c * hw..(c + 1) * hw];
                for dy in 0..kh {
                    let (y0, y1) = valid_range(height, dy, ph);
                    for dx in 0..kw {
                        let kv = k.at(n, c, dy, dx);
                        if kv == T::zero() {
                            continue;
                        }
                        let (x0, x1) = valid_range(width, dx, pw);
                        for y in y0..y1 {
                            let iy = y + dy - ph;
                            let orow = &mut oplane[y * width + x0..y * width + x1];
                            let irow = &iplane[iy * width + x0 + dx - pw..iy * width + x1 + dx - pw];
                            for (o, &i) in orow.iter_mut().zip(irow) {
                                *o += kv * i;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`conv2d_same`] with respect to its input.
pub fn conv2d_same_backward_input<T: Scalar>(
    delta: &Matrix<T>,
    k: &Kernel4<T>,
    height: usize,
    width: usize,
) -> Result<Matrix<T>> {
    let (n_out, c_in, kh, kw) = k.shape();
    check_conv_input(delta, n_out, height, width)?;
    let hw = height * width;
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut out = Matrix::zeros(delta.rows(), c_in * hw);
    for b in 0..delta.rows() {
        let d = delta.row(b);
        let g = out.row_mut(b);
        for n in 0..n_out {
            let dplane = &d[n * hw..(n + 1) * hw];
            for c in 0..c_in {
                let gplane = &mut g[c * hw..(c + 1) * hw];
                for dy in 0..kh {
                    let (y0, y1) = valid_range(height, dy, ph);
                    for dx in 0..kw {
                        let kv = k.at(n, c, dy, dx);
                        if kv == T::zero() {
                            continue;
                        }
                        let (x0, x1) = valid_range(width, dx, pw);
                        for y in y0..y1 {
                            let iy = y + dy - ph;
                            let drow = &dplane[y * width + x0..y * width + x1];
                            let grow = &mut gplane[iy * width + x0 + dx - pw..iy * width + x1 + dx - pw];
                            for (gv, &dv) in grow.iter_mut().zip(drow) {
                                *gv += kv * dv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Batch-mean gradient of [`conv2d_same`] with respect to the kernel.
pub fn conv2d_same_weight_grad<T: Scalar>(
    delta: &Matrix<T>,
    x: &Matrix<T>,
    shape: (usize, usize, usize, usize),
    height: usize,
    width: usize,
) -> Result<Kernel4<T>> {
    let (n_out, c_in, kh, kw) = shape;
    check_conv_input(delta, n_out, height, width)?;
    check_conv_input(x, c_in, height, width)?;
    if delta.rows() != x.rows() {
        return Err(Error::arg("conv weight grad: batch sizes differ"));
    }
    let hw = height * width;
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut g = Kernel4::zeros(n_out, c_in, kh, kw);
    for b in 0..x.rows() {
        let d = delta.row(b);
        let xin = x.row(b);
        for n in 0..n_out {
            let dplane = &d[n * hw..(n + 1) * hw];
            for c in 0..c_in {
                let iplane = &xin[c * hw..(c + 1) * hw];
                for dy in 0..kh {
                    let (y0, y1) = valid_range(height, dy, ph);
                    for dx in 0..kw {
                        let (x0, x1) = valid_range(width, dx, pw);
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let iy = y + dy - ph;
                            let drow = &dplane[y * width + x0..y * width + x1];
                            let irow = &iplane[iy * width + x0 + dx - pw..iy * width + x1 + dx - pw];
                            for (&dv, &iv) in drow.iter().zip(irow) {
                                acc += dv * iv;
                            }
                        }
                        *g.at_mut(n, c, dy, dx) += acc;
                    }
                }
            }
        }
    }
    let inv = T::one() / T::of(x.rows().max(1) as f64);
    for v in &mut g.data {
        *v *= inv;
    }
    Ok(g)
}

/// 2x2, stride-2 max pooling on `channels x height x width` maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl PoolGeometry {
    pub fn in_dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn out_dim(&self) -> usize {
        self.channels * (self.height / 2) * (self.width / 2)
    }

    /// Flat input index of the maximum of each pooling window, first
    /// occurrence on ties.
    fn argmax<T: Scalar>(&self, row: &[T]) -> Vec<usize> {
        let (h2, w2) = (self.height / 2, self.width / 2);
        let mut idx = Vec::with_capacity(self.out_dim());
        for c in 0..self.channels {
            let base = c * self.height * self.width;
            for y in 0..h2 {
                for x in 0..w2 {
                    let mut best = base + 2 * y * self.width + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = base + (2 * y + dy) * self.width + 2 * x + dx;
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    idx.push(best);
                }
            }
        }
        idx
    }

    pub fn forward<T: Scalar>(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        check_conv_input(x, self.channels, self.height, self.width)?;
        let mut out = Matrix::zeros(x.rows(), self.out_dim());
        for b in 0..x.rows() {
            let row = x.row(b);
            for (o, j) in out.row_mut(b).iter_mut().zip(self.argmax(row)) {
                *o = row[j];
            }
        }
        Ok(out)
    }

    /// Routes each output gradient to the input position that won the max.
    pub fn backward<T: Scalar>(&self, delta: &Matrix<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
        check_conv_input(x, self.channels, self.height, self.width)?;
        if delta.shape() != (x.rows(), self.out_dim()) {
            return Err(Error::arg("pool backward: delta shape mismatch"));
        }
        let mut out = Matrix::zeros(x.rows(), self.in_dim());
        for b in 0..x.rows() {
            let idx = self.argmax(x.row(b));
            let d = delta.row(b).to_vec();
            let g = out.row_mut(b);
            for (j, dv) in idx.into_iter().zip(d) {
                g[j] += dv;
            }
        }
        Ok(out)
    }
}
