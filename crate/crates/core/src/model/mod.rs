//! Networks whose layers are parameterized in SVD form.

mod conv;
mod cost;
mod factored;
mod network;

pub use conv::{
    conv2d_same, conv2d_same_backward_input, conv2d_same_weight_grad, decompose_conv, ConvGeometry, ConvPair, Kernel4,
    PoolGeometry,
};
pub use cost::{count_cost, dense_cost, factored_cost, LayerCost, NetworkCost};
pub(crate) use factored::clamp_to_floor;
pub use factored::{decompose_dense, FactoredWeight, SIGMA_FLOOR};
pub use network::{Activation, InputShape, Layer, LayerKind, LayerSpec, LayerTape, Network, NetworkSpec, Weight};
