//! Layer stack, initialization and the taped forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::conv::{
    conv2d_same, conv2d_same_backward_input, conv2d_same_weight_grad, ConvGeometry, ConvPair, Kernel4, PoolGeometry,
};
use crate::model::factored::{decompose_dense, FactoredWeight};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, a: T) -> T {
        match self {
            Activation::Relu => a.max(T::zero()),
            Activation::Tanh => a.tanh(),
            Activation::Identity => a,
        }
    }

    /// Derivative at pre-activation `a`; relu's derivative at 0 is 0.
    pub fn derivative<T: Scalar>(self, a: T) -> T {
        match self {
            Activation::Relu => {
                if a > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = a.tanh();
                T::one() - t * t
            }
            Activation::Identity => T::one(),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// A weight matrix stored densely or as SVD factors. For convolutions the
/// matrix is the kernel view `K'`.
#[derive(Debug, Clone, PartialEq)]
pub enum Weight<T> {
    Full(Matrix<T>),
    Factored(FactoredWeight<T>),
}

impl<T: Scalar> Weight<T> {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Weight::Full(w) => w.shape(),
            Weight::Factored(f) => f.dims(),
        }
    }

    /// The dense matrix the weight represents.
    pub fn effective(&self) -> Matrix<T> {
        match self {
            Weight::Full(w) => w.clone(),
            Weight::Factored(f) => f.reconstruct(),
        }
    }

    pub fn factored(&self) -> Option<&FactoredWeight<T>> {
        match self {
            Weight::Factored(f) => Some(f),
            Weight::Full(_) => None,
        }
    }

    pub fn factored_mut(&mut self) -> Option<&mut FactoredWeight<T>> {
        match self {
            Weight::Factored(f) => Some(f),
            Weight::Full(_) => None,
        }
    }

    pub fn rank(&self) -> Option<usize> {
        self.factored().map(FactoredWeight::rank)
    }

    fn cast<U: Scalar>(&self) -> Weight<U> {
        match self {
            Weight::Full(w) => Weight::Full(w.cast()),
            Weight::Factored(f) => Weight::Factored(f.cast()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind<T> {
    Dense(Weight<T>),
    Conv { weight: Weight<T>, geom: ConvGeometry },
    MaxPool(PoolGeometry),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub kind: LayerKind<T>,
    pub activation: Activation,
    /// Additive bias, only ever present on the final classifier.
    pub bias: Option<Vec<T>>,
}

/// Values cached by the forward pass for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTape<T> {
    /// `h_{i-1}`.
    pub input: Matrix<T>,
    /// `a_i`.
    pub pre_activation: Matrix<T>,
    /// `h_i = f(a_i)`.
    pub post_activation: Matrix<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn in_dim(&self) -> usize {
        match &self.kind {
            LayerKind::Dense(w) => w.dims().1,
            LayerKind::Conv { geom, .. } => geom.in_dim(),
            LayerKind::MaxPool(p) => p.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match &self.kind {
            LayerKind::Dense(w) => w.dims().0,
            LayerKind::Conv { geom, .. } => geom.out_dim(),
            LayerKind::MaxPool(p) => p.out_dim(),
        }
    }

    pub fn weight(&self) -> Option<&Weight<T>> {
        match &self.kind {
            LayerKind::Dense(w) | LayerKind::Conv { weight: w, .. } => Some(w),
            LayerKind::MaxPool(_) => None,
        }
    }

    pub fn weight_mut(&mut self) -> Option<&mut Weight<T>> {
        match &mut self.kind {
            LayerKind::Dense(w) | LayerKind::Conv { weight: w, .. } => Some(w),
            LayerKind::MaxPool(_) => None,
        }
    }

    pub fn is_parametric(&self) -> bool {
        self.weight().is_some()
    }

    pub fn pre_activation(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.in_dim() {
            return Err(Error::arg(format!(
                "layer expects {} input features, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let mut a = match &self.kind {
            LayerKind::Dense(Weight::Full(w)) => x.matmul_t(w)?,
            LayerKind::Dense(Weight::Factored(f)) => f.apply(x)?,
            LayerKind::Conv {
                weight: Weight::Full(k),
                geom,
            } => {
                let kernel = Kernel4::from_matrix(k, geom.kernel_shape())?;
                conv2d_same(x, &kernel, geom.height, geom.width)?
            }
            LayerKind::Conv {
                weight: Weight::Factored(f),
                geom,
            } => ConvPair::from_factors(f, geom)?.apply(x, geom.height, geom.width)?,
            LayerKind::MaxPool(p) => p.forward(x)?,
        };
        if let Some(bias) = &self.bias {
            for i in 0..a.rows() {
                for (v, &b) in a.row_mut(i).iter_mut().zip(bias) {
                    *v += b;
                }
            }
        }
        Ok(a)
    }

    /// Gradient with respect to this layer's input given `delta` with respect
    /// to its pre-activation. `weight_override` substitutes the matrix used
    /// in place of `W` (for sign-concordant feedback).
    pub fn backprop_input(
        &self,
        delta: &Matrix<T>,
        input: &Matrix<T>,
        weight_override: Option<&Matrix<T>>,
    ) -> Result<Matrix<T>> {
        match &self.kind {
            LayerKind::Dense(w) => match (weight_override, w) {
                (Some(m), _) => delta.matmul(m),
                (None, Weight::Full(m)) => delta.matmul(m),
                (None, Weight::Factored(f)) => f.apply_transpose(delta),
            },
            LayerKind::Conv { weight, geom } => {
                let km = match weight_override {
                    Some(m) => m.clone(),
                    None => weight.effective(),
                };
                let kernel = Kernel4::from_matrix(&km, geom.kernel_shape())?;
                conv2d_same_backward_input(delta, &kernel, geom.height, geom.width)
            }
            LayerKind::MaxPool(p) => p.backward(delta, input),
        }
    }

    /// Batch-mean gradient of the loss with respect to the (effective)
    /// weight matrix, given `delta` with respect to the pre-activation.
    pub fn weight_grad(&self, delta: &Matrix<T>, input: &Matrix<T>) -> Result<Matrix<T>> {
        if delta.rows() != input.rows() || delta.rows() == 0 {
            return Err(Error::arg("weight grad: batch sizes differ or are empty"));
        }
        match &self.kind {
            LayerKind::Dense(_) => {
                let inv = T::one() / T::of(delta.rows() as f64);
                Ok(delta.t_matmul(input)?.scale(inv))
            }
            LayerKind::Conv { geom, .. } => {
                let g = conv2d_same_weight_grad(delta, input, geom.kernel_shape(), geom.height, geom.width)?;
                Ok(g.to_matrix())
            }
            LayerKind::MaxPool(_) => Err(Error::arg("pooling layers have no weights")),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        Layer {
            kind: match &self.kind {
                LayerKind::Dense(w) => LayerKind::Dense(w.cast()),
                LayerKind::Conv { weight, geom } => LayerKind::Conv {
                    weight: weight.cast(),
                    geom: *geom,
                },
                LayerKind::MaxPool(p) => LayerKind::MaxPool(*p),
            },
            activation: self.activation,
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|&x| U::of(x.as_f64())).collect()),
        }
    }
}

/// Shape of one input sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputShape {
    Flat(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl InputShape {
    pub fn dim(&self) -> usize {
        match *self {
            InputShape::Flat(d) => d,
            InputShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        out: usize,
        activation: Activation,
        factored: bool,
    },
    Conv {
        out_channels: usize,
        kernel: (usize, usize),
        activation: Activation,
        factored: bool,
    },
    MaxPool,
}

/// Architecture description: ordered layer descriptors over an input shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    /// Whether the final layer carries an additive bias.
    pub output_bias: bool,
}

impl NetworkSpec {
    /// Three weight layers: `d_in -> hidden -> hidden -> d_out`, relu hidden
    /// units and identity logits.
    pub fn mlp3(d_in: usize, hidden: usize, d_out: usize, factored: bool) -> Self {
        let dense = |out, activation| LayerSpec::Dense {
            out,
            activation,
            factored,
        };
        NetworkSpec {
            input: InputShape::Flat(d_in),
            layers: vec![
                dense(hidden, Activation::Relu),
                dense(hidden, Activation::Relu),
                dense(d_out, Activation::Identity),
            ],
            output_bias: true,
        }
    }

    /// conv-pool-conv-pool-conv-pool-fc-fc on 3x32x32 images with 3x3
    /// kernels. `channels` gives the three conv widths and the hidden fc width
    /// (96, 192, 512, 1024 in the reference architecture).
    pub fn small_conv(channels: [usize; 4], classes: usize, factored: bool) -> Self {
        let conv = |out_channels| LayerSpec::Conv {
            out_channels,
            kernel: (3, 3),
            activation: Activation::Relu,
            factored,
        };
        NetworkSpec {
            input: InputShape::Image {
                channels: 3,
                height: 32,
                width: 32,
            },
            layers: vec![
                conv(channels[0]),
                LayerSpec::MaxPool,
                conv(channels[1]),
                LayerSpec::MaxPool,
                conv(channels[2]),
                LayerSpec::MaxPool,
                LayerSpec::Dense {
                    out: channels[3],
                    activation: Activation::Relu,
                    factored,
                },
                LayerSpec::Dense {
                    out: classes,
                    activation: Activation::Identity,
                    factored,
                },
            ],
            output_bias: true,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { out, .. }) => *out,
            _ => 0,
        }
    }
}

/// A network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub input: InputShape,
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Network<T> {
    /// Samples dense weights (He-normal for relu/tanh layers, `1/fan_in`
    /// variance for the identity output) and factors them at full rank when
    /// the descriptor asks for it.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        // Current feature-map geometry while walking the stack.
        let (mut channels, mut height, mut width, mut flat) = match spec.input {
            InputShape::Flat(d) => (d, 1, 1, true),
            InputShape::Image {
                channels,
                height,
                width,
            } => (channels, height, width, false),
        };
        let n_layers = spec.layers.len();
        for (idx, ls) in spec.layers.iter().enumerate() {
            let is_last = idx + 1 == n_layers;
            let layer = match *ls {
                LayerSpec::Dense {
                    out,
                    activation,
                    factored,
                } => {
                    let n = channels * height * width;
                    let w = sample_weight(&mut rng, out, n, n, activation);
                    let weight = make_weight(w, factored)?;
                    channels = out;
                    height = 1;
                    width = 1;
                    flat = true;
                    Layer {
                        kind: LayerKind::Dense(weight),
                        activation,
                        bias: (is_last && spec.output_bias).then(|| vec![T::zero(); out]),
                    }
                }
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    activation,
                    factored,
                } => {
                    if flat {
                        return Err(Error::arg("convolution requires image-shaped input"));
                    }
                    let geom = ConvGeometry {
                        in_channels: channels,
                        out_channels,
                        kh: kernel.0,
                        kw: kernel.1,
                        height,
                        width,
                    };
                    let (rows, cols) = geom.matrix_shape();
                    let fan_in = channels * kernel.0 * kernel.1;
                    let w = sample_weight(&mut rng, rows, cols, fan_in, activation);
                    let weight = make_weight(w, factored)?;
                    channels = out_channels;
                    Layer {
                        kind: LayerKind::Conv { weight, geom },
                        activation,
                        bias: None,
                    }
                }
                LayerSpec::MaxPool => {
                    if height % 2 != 0 || width % 2 != 0 || flat {
                        return Err(Error::arg("max pooling needs even spatial dimensions"));
                    }
                    let p = PoolGeometry {
                        channels,
                        height,
                        width,
                    };
                    height /= 2;
                    width /= 2;
                    Layer {
                        kind: LayerKind::MaxPool(p),
                        activation: Activation::Identity,
                        bias: None,
                    }
                }
            };
            layers.push(layer);
        }
        let net = Network {
            input: spec.input,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn from_layers(input: InputShape, layers: Vec<Layer<T>>) -> Result<Self> {
        let net = Network { input, layers };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        let mut d = self.input.dim();
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim() != d {
                return Err(Error::arg(format!(
                    "layer {i} expects {} inputs but receives {d}",
                    l.in_dim()
                )));
            }
            if let Some(b) = &l.bias {
                if b.len() != l.out_dim() || i + 1 != self.layers.len() {
                    return Err(Error::arg("bias allowed only on the final layer, sized to its output"));
                }
            }
            d = l.out_dim();
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input.dim(), Layer::out_dim)
    }

    /// Indices of layers that carry weights.
    pub fn parametric_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_parametric())
            .collect()
    }

    /// Forward pass caching every layer's input, pre- and post-activation.
    pub fn forward(&self, x: &Matrix<T>) -> Result<(Matrix<T>, Vec<LayerTape<T>>)> {
        let mut tapes = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let a = layer.pre_activation(&h)?;
            let out = a.map(|v| layer.activation.apply(v));
            if !out.is_finite() {
                return Err(Error::numerical(format!("non-finite activation in layer {i}")));
            }
            tapes.push(LayerTape {
                input: h,
                pre_activation: a,
                post_activation: out.clone(),
            });
            h = out;
        }
        Ok((h, tapes))
    }

    /// Logits only, without keeping tapes.
    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.pre_activation(&h)?.map(|v| layer.activation.apply(v));
            if !h.is_finite() {
                return Err(Error::numerical(format!("non-finite activation in layer {i}")));
            }
        }
        Ok(h)
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input: self.input,
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }
}

fn sample_weight<T: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
    activation: Activation,
) -> Matrix<T> {
    let gain = match activation {
        Activation::Relu => 2.0,
        Activation::Tanh | Activation::Identity => 1.0,
    };
    let std = (gain / fan_in.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

fn make_weight<T: Scalar>(w: Matrix<T>, factored: bool) -> Result<Weight<T>> {
    if factored {
        let r = w.rows().min(w.cols());
        Ok(Weight::Factored(decompose_dense(&w, r)?))
    } else {
        Ok(Weight::Full(w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_derivative_at_kink_is_zero() {
        assert_eq!(Activation::Relu.derivative(0.0f64), 0.0);
        assert_eq!(Activation::Relu.derivative(1e-300f64), 1.0);
    }

    #[test]
    fn mlp_dimensions_chain() {
        let net = Network::<f64>::init(&NetworkSpec::mlp3(5, 7, 3, true), 1).unwrap();
        assert_eq!(net.layers.len(), 3);
        assert_eq!(net.output_dim(), 3);
        assert_eq!(net.layers[0].weight().unwrap().rank(), Some(5));
        let (out, tapes) = net.forward(&Matrix::zeros(4, 5)).unwrap();
        assert_eq!(out.shape(), (4, 3));
        assert_eq!(tapes.len(), 3);
    }

    #[test]
    fn small_conv_dimensions_chain() {
        let spec = NetworkSpec::small_conv([4, 6, 8, 16], 10, true);
        let net = Network::<f32>::init(&spec, 3).unwrap();
        assert_eq!(net.layers[6].in_dim(), 8 * 4 * 4);
        assert_eq!(net.output_dim(), 10);
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let net = Network::<f64>::init(&NetworkSpec::mlp3(5, 7, 3, false), 1).unwrap();
        assert!(matches!(net.forward(&Matrix::zeros(1, 4)), Err(Error::Argument(_))));
    }
}
