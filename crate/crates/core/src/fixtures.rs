//! Seeded model builders used by the CLI demo, tests and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::model::{BatchNormLayer, ConvLayer, Layer, LinearLayer, ModelGraph, Shape3, Tensor4, DEFAULT_BN_EPS};

/// Incremental builder for sequential graphs with He-normal initialisation.
pub struct GraphBuilder<R: Rng> {
    rng: R,
    input: Shape3,
    channels: usize,
    features: usize,
    layers: Vec<Layer>,
}

impl<R: Rng> GraphBuilder<R> {
    pub fn new(input: Shape3, rng: R) -> Self {
        Self { rng, input, channels: input.channels, features: input.len(), layers: Vec::new() }
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f32> {
        let dist = Normal::new(0.0, std).unwrap();
        (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect()
    }

    /// Square conv with stride 1 and "same" padding.
    pub fn conv(mut self, c_out: usize, kernel: usize, bias: bool) -> Self {
        let c_in = self.channels;
        let fan_in = c_in * kernel * kernel;
        let data = self.normal(c_out * fan_in, (2.0 / fan_in as f64).sqrt());
        let bias = bias.then(|| vec![0.0; c_out]);
        self.layers.push(Layer::Conv(ConvLayer {
            weights: Tensor4::new([c_out, c_in, kernel, kernel], data).unwrap(),
            bias,
            stride: (1, 1),
            padding: (kernel / 2, kernel / 2),
        }));
        self.channels = c_out;
        self
    }

    /// Batch norm with unit scale and zero shift.
    pub fn bn(mut self) -> Self {
        let c = self.channels;
        self.layers.push(Layer::BatchNorm(BatchNormLayer {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            eps: DEFAULT_BN_EPS,
        }));
        self
    }

    /// Batch norm with scales drawn from `[0.05, 1.5)` and random statistics,
    /// mimicking a trained layer.
    pub fn bn_random(mut self) -> Self {
        let c = self.channels;
        let gamma = (0..c).map(|_| self.rng.random_range(0.05f32..1.5)).collect();
        let beta = (0..c).map(|_| self.rng.random_range(-0.2f32..0.2)).collect();
        let running_mean = (0..c).map(|_| self.rng.random_range(-0.5f32..0.5)).collect();
        let running_var = (0..c).map(|_| self.rng.random_range(0.5f32..2.0)).collect();
        self.layers.push(Layer::BatchNorm(BatchNormLayer { gamma, beta, running_mean, running_var, eps: DEFAULT_BN_EPS }));
        self
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(Layer::Relu);
        self
    }

    pub fn maxpool(mut self, kernel: usize, stride: usize) -> Self {
        self.layers.push(Layer::MaxPool { kernel, stride });
        self
    }

    pub fn gap(mut self) -> Self {
        self.layers.push(Layer::GlobalAvgPool);
        self.features = self.channels;
        self
    }

    /// Linear head. `in_features` is the channel count after a global pool,
    /// otherwise it must be supplied by the caller through `flat_features`.
    pub fn linear(mut self, out: usize) -> Self {
        let in_features = self.features;
        let weights = self.normal(out * in_features, (1.0 / in_features as f64).sqrt());
        self.layers.push(Layer::Linear(LinearLayer { weights, bias: Some(vec![0.0; out]), out_features: out, in_features }));
        self.channels = out;
        self.features = out;
        self
    }

    /// Sets the flattened feature count consumed by a following linear layer.
    pub fn flat_features(mut self, n: usize) -> Self {
        self.features = n;
        self
    }

    pub fn build(self, name: &str) -> ModelGraph {
        ModelGraph::new(name, self.input, self.layers).expect("builder produced a consistent graph")
    }
}

pub const SYNTH_INPUT: Shape3 = Shape3 { channels: 1, height: 16, width: 16 };

/// Five-conv VGG-style classifier for 1x16x16 two-class inputs.
/// Conv widths are `[32, 32, 64, 64, 64]`.
pub fn vgg_tiny(seed: u64) -> ModelGraph {
    GraphBuilder::new(SYNTH_INPUT, ChaCha8Rng::seed_from_u64(seed))
        .conv(32, 3, false).bn().relu()
        .conv(32, 3, false).bn().relu()
        .maxpool(2, 2)
        .conv(64, 3, false).bn().relu()
        .maxpool(2, 2)
        .conv(64, 3, false).bn().relu()
        .conv(64, 3, false).bn().relu()
        .gap()
        .linear(2)
        .build("vgg-tiny")
}

/// Sixteen-conv VGG-19-shaped feature extractor (narrow widths) with a
/// two-class head. Batch norms carry trained-looking random statistics.
pub fn vgg16_conv(seed: u64) -> ModelGraph {
    const WIDTHS: [usize; 16] = [32, 32, 48, 48, 64, 64, 64, 64, 96, 96, 96, 96, 128, 128, 128, 128];
    let mut b = GraphBuilder::new(SYNTH_INPUT, ChaCha8Rng::seed_from_u64(seed));
    for (i, &w) in WIDTHS.iter().enumerate() {
        b = b.conv(w, 3, false).bn_random().relu();
        if matches!(i, 1 | 3 | 7 | 11) {
            b = b.maxpool(2, 2);
        }
    }
    b.gap().linear(2).build("vgg19-conv16")
}

/// Random straight-line CNN with `n_conv` conv layers whose widths are drawn
/// from `widths`. Kernels are 1x1 or 3x3, roughly half the convs are followed
/// by a batch norm, and the head is global pool + linear.
pub fn random_sequential(seed: u64, n_conv: usize, widths: std::ops::RangeInclusive<usize>) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan: Vec<(usize, usize, bool)> = (0..n_conv)
        .map(|_| (rng.random_range(widths.clone()), if rng.random_bool(0.5) { 1 } else { 3 }, rng.random_bool(0.5)))
        .collect();
    let mut b = GraphBuilder::new(Shape3::new(3, 4, 4), rng);
    for (w, k, bn) in plan {
        b = b.conv(w, k, false);
        if bn {
            b = b.bn_random();
        }
        b = b.relu();
    }
    b.gap().linear(4).build("random-seq")
}
