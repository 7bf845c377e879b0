//! Parameter and inference multiply-accumulate counts.

use crate::model::network::{LayerKind, Network, Weight};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerCost {
    /// Stored weight entries (factors count `m r + r + r n`).
    pub params: u64,
    pub bias_params: u64,
    /// Multiply-accumulates per sample.
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NetworkCost {
    pub layers: Vec<LayerCost>,
    pub params: u64,
    pub inference_flops: u64,
}

/// Factored `m x n` at rank `r`: `m r + r + r n` parameters and
/// `r n + r + m r` multiply-accumulates.
pub fn factored_cost(m: usize, n: usize, r: usize) -> LayerCost {
    let (m, n, r) = (m as u64, n as u64, r as u64);
    LayerCost {
        params: m * r + r + r * n,
        bias_params: 0,
        macs: r * n + r + m * r,
    }
}

pub fn dense_cost(m: usize, n: usize) -> LayerCost {
    let mn = (m * n) as u64;
    LayerCost {
        params: mn,
        bias_params: 0,
        macs: mn,
    }
}

pub fn count_cost<T: Scalar>(net: &Network<T>) -> NetworkCost {
    let layers: Vec<LayerCost> = net
        .layers
        .iter()
        .map(|layer| {
            let mut c = match &layer.kind {
                LayerKind::Dense(Weight::Full(w)) => dense_cost(w.rows(), w.cols()),
                LayerKind::Dense(Weight::Factored(f)) => {
                    let (m, n) = f.dims();
                    factored_cost(m, n, f.rank())
                }
                LayerKind::Conv { weight, geom } => {
                    let positions = (geom.height * geom.width) as u64;
                    let (n, c, kh, kw) = geom.kernel_shape();
                    match weight {
                        Weight::Full(_) => {
                            let k = (n * c * kh * kw) as u64;
                            LayerCost {
                                params: k,
                                bias_params: 0,
                                macs: k * positions,
                            }
                        }
                        Weight::Factored(f) => {
                            // K1 is r x C x kh, K2 is N x r x kw, plus the r scales.
                            let r = f.rank() as u64;
                            let k1 = r * (c * kh) as u64;
                            let k2 = (n * kw) as u64 * r;
                            LayerCost {
                                params: k1 + r + k2,
                                bias_params: 0,
                                macs: (k1 + r + k2) * positions,
                            }
                        }
                    }
                }
                LayerKind::MaxPool(_) => LayerCost::default(),
            };
            c.bias_params = layer.bias.as_ref().map_or(0, |b| b.len() as u64);
            c
        })
        .collect();
    let params = layers.iter().map(|c| c.params + c.bias_params).sum();
    let inference_flops = layers.iter().map(|c| c.macs).sum();
    NetworkCost {
        layers,
        params,
        inference_flops,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factored_formula() {
        let c = factored_cost(100, 200, 10);
        assert_eq!(c.params, 3010);
        assert_eq!(c.macs, 3010);
        assert_eq!(dense_cost(100, 200).params, 20000);
    }

    #[test]
    fn full_rank_square_factoring_costs_more() {
        let m = 64;
        assert_eq!(factored_cost(m, m, m).params, (2 * m * m + m) as u64);
        assert!(factored_cost(m, m, m).params > dense_cost(m, m).params);
    }
}
