//! Sequential CNN graph: typed layers, weight tensors, shape validation and
//! structural introspection.
//!
//! Graphs are generic over the element type so the same structure can be
//! stored as `f32` (the on-disk format) and trained in `f64`.

use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed architecture manifest: {0}")]
    Manifest(String),
    #[error("bad weight blob magic {found:?}, expected \"NNWM\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported weight blob version {0}, expected 1")]
    BadVersion(u32),
    #[error("weight blob size mismatch: manifest declares {expected} bytes of tensors, blob holds {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("shape inconsistency at layer {layer}: {reason}")]
    Shape { layer: usize, reason: String },
    #[error("non-finite value in {tensor} of layer {layer}")]
    NonFinite { layer: usize, tensor: &'static str },
    #[error("model has no convolutional layer")]
    NoConv,
    #[error("conv index {index} out of range ({count} conv layers)")]
    ConvIndex { index: usize, count: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Conv filter bank laid out `(c_out, c_in, h, w)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T = f32> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T: Copy> Tensor4<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self, ModelError> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || data.len() != expected {
            return Err(ModelError::Shape {
                layer: 0,
                reason: format!("tensor shape {shape:?} does not match {} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn c_out(&self) -> usize {
        self.shape[0]
    }

    pub fn c_in(&self) -> usize {
        self.shape[1]
    }

    /// Number of values in one output-channel filter.
    pub fn filter_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn filter(&self, k: usize) -> &[T] {
        let n = self.filter_len();
        &self.data[k * n..(k + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T = f32> {
    pub weights: Tensor4<T>,
    pub bias: Option<Vec<T>>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl<T: Copy> ConvLayer<T> {
    pub fn c_out(&self) -> usize {
        self.weights.c_out()
    }

    pub fn c_in(&self) -> usize {
        self.weights.c_in()
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape[2], self.weights.shape[3])
    }
}

pub const DEFAULT_BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

impl<T: Copy> BatchNormLayer<T> {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Fully connected layer, weights `(out_features, in_features)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer<T = f32> {
    pub weights: Vec<T>,
    pub bias: Option<Vec<T>>,
    pub out_features: usize,
    pub in_features: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T = f32> {
    Conv(ConvLayer<T>),
    BatchNorm(BatchNormLayer<T>),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    GlobalAvgPool,
    Linear(LinearLayer<T>),
}

impl<T> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Linear(_) => "linear",
        }
    }
}

/// Activation shape `(channels, height, width)`. Linear outputs are `(n, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T = f32> {
    pub name: String,
    pub input: Shape3,
    pub layers: Vec<Layer<T>>,
}

fn shape_err(layer: usize, reason: impl Into<String>) -> ModelError {
    ModelError::Shape { layer, reason: reason.into() }
}

fn check_finite<T: Float>(layer: usize, tensor: &'static str, v: &[T]) -> Result<(), ModelError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite { layer, tensor })
    }
}

/// Output spatial extent of a window op, or `None` if the window does not fit.
pub(crate) fn window_out(size: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

impl<T: Float> ModelGraph<T> {
    /// Builds a graph and checks every structural invariant.
    pub fn new(name: impl Into<String>, input: Shape3, layers: Vec<Layer<T>>) -> Result<Self, ModelError> {
        let graph = Self { name: name.into(), input, layers };
        graph.validate()?;
        Ok(graph)
    }

    /// Activation shapes after each layer, validating adjacency on the way.
    pub fn layer_shapes(&self) -> Result<Vec<Shape3>, ModelError> {
        if self.input.is_empty() {
            return Err(shape_err(0, "input shape has a zero dimension"));
        }
        let mut cur = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                Layer::Conv(conv) => {
                    let [c_out, c_in, kh, kw] = conv.weights.shape;
                    if c_out * c_in * kh * kw == 0 || conv.weights.data.len() != c_out * c_in * kh * kw {
                        return Err(shape_err(i, format!("conv weight shape {:?} inconsistent", conv.weights.shape)));
                    }
                    if c_in != cur.channels {
                        return Err(shape_err(i, format!("conv expects {c_in} input channels, receives {}", cur.channels)));
                    }
                    if conv.stride.0 == 0 || conv.stride.1 == 0 {
                        return Err(shape_err(i, "conv stride must be >= 1"));
                    }
                    if let Some(b) = &conv.bias {
                        if b.len() != c_out {
                            return Err(shape_err(i, format!("conv bias length {} != c_out {c_out}", b.len())));
                        }
                        check_finite(i, "bias", b)?;
                    }
                    check_finite(i, "weights", &conv.weights.data)?;
                    let h = window_out(cur.height, conv.padding.0, kh, conv.stride.0);
                    let w = window_out(cur.width, conv.padding.1, kw, conv.stride.1);
                    match (h, w) {
                        (Some(h), Some(w)) => Shape3::new(c_out, h, w),
                        _ => return Err(shape_err(i, "conv kernel larger than padded input")),
                    }
                }
                Layer::BatchNorm(bn) => {
                    let c = bn.gamma.len();
                    if bn.beta.len() != c || bn.running_mean.len() != c || bn.running_var.len() != c {
                        return Err(shape_err(i, "batchnorm vectors differ in length"));
                    }
                    if c != cur.channels {
                        return Err(shape_err(i, format!("batchnorm has {c} channels, receives {}", cur.channels)));
                    }
                    if !(bn.eps > T::zero()) {
                        return Err(shape_err(i, "batchnorm epsilon must be positive"));
                    }
                    check_finite(i, "gamma", &bn.gamma)?;
                    check_finite(i, "beta", &bn.beta)?;
                    check_finite(i, "running_mean", &bn.running_mean)?;
                    check_finite(i, "running_var", &bn.running_var)?;
                    if bn.running_var.iter().any(|&v| v < T::zero()) {
                        return Err(shape_err(i, "batchnorm running_var is negative"));
                    }
                    cur
                }
                Layer::Relu => cur,
                Layer::MaxPool { kernel, stride } => {
                    if *kernel == 0 || *stride == 0 {
                        return Err(shape_err(i, "maxpool kernel and stride must be >= 1"));
                    }
                    match (window_out(cur.height, 0, *kernel, *stride), window_out(cur.width, 0, *kernel, *stride)) {
                        (Some(h), Some(w)) => Shape3::new(cur.channels, h, w),
                        _ => return Err(shape_err(i, "maxpool window larger than input")),
                    }
                }
                Layer::GlobalAvgPool => Shape3::new(cur.channels, 1, 1),
                Layer::Linear(lin) => {
                    if lin.out_features == 0 || lin.weights.len() != lin.out_features * lin.in_features {
                        return Err(shape_err(i, "linear weight length inconsistent"));
                    }
                    if lin.in_features != cur.len() {
                        return Err(shape_err(i, format!("linear expects {} inputs, receives {}", lin.in_features, cur.len())));
                    }
                    if let Some(b) = &lin.bias {
                        if b.len() != lin.out_features {
                            return Err(shape_err(i, "linear bias length != out_features"));
                        }
                        check_finite(i, "bias", b)?;
                    }
                    check_finite(i, "weights", &lin.weights)?;
                    Shape3::new(lin.out_features, 1, 1)
                }
            };
            out.push(cur);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.layer_shapes()?;
        if self.conv_layer_indices().is_empty() {
            return Err(ModelError::NoConv);
        }
        Ok(())
    }

    pub fn output_shape(&self) -> Result<Shape3, ModelError> {
        Ok(self.layer_shapes()?.last().copied().unwrap_or(self.input))
    }

    /// Graph positions of all conv layers, in order. Its length is `t`.
    pub fn conv_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Conv(_)).then_some(i))
            .collect()
    }

    /// `c_out` of every conv layer, in graph order.
    pub fn channel_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c.c_out()),
                _ => None,
            })
            .collect()
    }

    /// Graph position of the conv layer with ordinal `conv`.
    pub fn conv_position(&self, conv: usize) -> Result<usize, ModelError> {
        let idx = self.conv_layer_indices();
        idx.get(conv).copied().ok_or(ModelError::ConvIndex { index: conv, count: idx.len() })
    }

    pub fn conv(&self, conv: usize) -> Result<&ConvLayer<T>, ModelError> {
        match &self.layers[self.conv_position(conv)?] {
            Layer::Conv(c) => Ok(c),
            _ => unreachable!(),
        }
    }

    /// The batch-norm layer directly after conv `conv`, if any.
    pub fn bn_after(&self, conv: usize) -> Result<Option<&BatchNormLayer<T>>, ModelError> {
        let pos = self.conv_position(conv)?;
        Ok(match self.layers.get(pos + 1) {
            Some(Layer::BatchNorm(bn)) => Some(bn),
            _ => None,
        })
    }

    /// Total number of scalar parameters (including running statistics).
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.weights.data.len() + c.bias.as_ref().map_or(0, Vec::len),
                Layer::BatchNorm(b) => 4 * b.channels(),
                Layer::Linear(l) => l.weights.len() + l.bias.as_ref().map_or(0, Vec::len),
                _ => 0,
            })
            .sum()
    }

    /// Converts every stored value to another float type.
    pub fn cast<U: Float>(&self) -> ModelGraph<U> {
        let c = |v: &[T]| -> Vec<U> { v.iter().map(|&x| U::from(x).unwrap()).collect() };
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(conv) => Layer::Conv(ConvLayer {
                    weights: Tensor4 { shape: conv.weights.shape, data: c(&conv.weights.data) },
                    bias: conv.bias.as_deref().map(c),
                    stride: conv.stride,
                    padding: conv.padding,
                }),
                Layer::BatchNorm(bn) => Layer::BatchNorm(BatchNormLayer {
                    gamma: c(&bn.gamma),
                    beta: c(&bn.beta),
                    running_mean: c(&bn.running_mean),
                    running_var: c(&bn.running_var),
                    eps: U::from(bn.eps).unwrap(),
                }),
                Layer::Relu => Layer::Relu,
                Layer::MaxPool { kernel, stride } => Layer::MaxPool { kernel: *kernel, stride: *stride },
                Layer::GlobalAvgPool => Layer::GlobalAvgPool,
                Layer::Linear(lin) => Layer::Linear(LinearLayer {
                    weights: c(&lin.weights),
                    bias: lin.bias.as_deref().map(c),
                    out_features: lin.out_features,
                    in_features: lin.in_features,
                }),
            })
            .collect();
        ModelGraph { name: self.name.clone(), input: self.input, layers }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn tiny() -> ModelGraph {
        // conv, bn, relu, conv, gap, linear
        let conv = |c_out, c_in| {
            Layer::Conv(ConvLayer {
                weights: Tensor4::new([c_out, c_in, 3, 3], vec![0.1; c_out * c_in * 9]).unwrap(),
                bias: None,
                stride: (1, 1),
                padding: (1, 1),
            })
        };
        let layers = vec![
            conv(4, 1),
            Layer::BatchNorm(BatchNormLayer {
                gamma: vec![1.0; 4],
                beta: vec![0.0; 4],
                running_mean: vec![0.0; 4],
                running_var: vec![1.0; 4],
                eps: DEFAULT_BN_EPS,
            }),
            Layer::Relu,
            conv(6, 4),
            Layer::GlobalAvgPool,
            Layer::Linear(LinearLayer { weights: vec![0.0; 12], bias: Some(vec![0.0; 2]), out_features: 2, in_features: 6 }),
        ];
        ModelGraph::new("tiny", Shape3::new(1, 8, 8), layers).unwrap()
    }

    #[test]
    fn conv_indices_and_counts() {
        let m = tiny();
        assert_eq!(m.conv_layer_indices(), vec![0, 3]);
        assert_eq!(m.channel_counts(), vec![4, 6]);
        assert_eq!(m.output_shape().unwrap(), Shape3::new(2, 1, 1));
    }

    #[test]
    fn vgg_fixtures_have_expected_conv_sets() {
        assert_eq!(fixtures::vgg_tiny(0).channel_counts(), vec![32, 32, 64, 64, 64]);
        let vgg16 = fixtures::vgg16_conv(0);
        assert_eq!(vgg16.conv_layer_indices().len(), 16);
    }

    #[test]
    fn no_conv_rejected_but_introspection_is_empty() {
        let g: ModelGraph = ModelGraph {
            name: "mlp".into(),
            input: Shape3::new(4, 1, 1),
            layers: vec![Layer::Linear(LinearLayer { weights: vec![0.0; 8], bias: None, out_features: 2, in_features: 4 })],
        };
        assert!(g.conv_layer_indices().is_empty());
        assert!(g.channel_counts().is_empty());
        assert!(matches!(g.validate(), Err(ModelError::NoConv)));
    }

    #[test]
    fn bn_length_mismatch_rejected() {
        let mut m = tiny();
        if let Layer::BatchNorm(bn) = &mut m.layers[1] {
            bn.gamma.pop();
        }
        assert!(matches!(m.validate(), Err(ModelError::Shape { layer: 1, .. })));
    }

    #[test]
    fn negative_running_var_and_nan_rejected() {
        let mut m = tiny();
        if let Layer::BatchNorm(bn) = &mut m.layers[1] {
            bn.running_var[0] = -1.0;
        }
        assert!(m.validate().is_err());
        let mut m = tiny();
        if let Layer::Conv(c) = &mut m.layers[0] {
            c.weights.data[3] = f32::NAN;
        }
        assert!(matches!(m.validate(), Err(ModelError::NonFinite { layer: 0, .. })));
    }

    #[test]
    fn cast_roundtrip_is_exact_for_f32_values() {
        let m = fixtures::vgg_tiny(3);
        assert_eq!(m.cast::<f64>().cast::<f32>(), m);
    }
}
