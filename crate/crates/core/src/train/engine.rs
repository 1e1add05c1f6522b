//! Forward and backward passes over a sequential graph, NCHW layout.
//!
//! Per-sample work is spread over threads; every reduction across samples
//! is summed in sample order, so results do not depend on thread count.

use num_traits::Float;
use rayon::prelude::*;

use super::TrainError;
use crate::model::{BatchNormLayer, ConvLayer, Layer, LinearLayer, ModelGraph, Shape3};

/// Float types the engine runs on.
pub trait Scalar: Float + Send + Sync + std::fmt::Debug + std::iter::Sum + std::ops::AddAssign + 'static {}
impl<T: Float + Send + Sync + std::fmt::Debug + std::iter::Sum + std::ops::AddAssign + 'static> Scalar for T {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
enum LayerCache<F> {
    Conv { input: Vec<F>, in_shape: Shape3 },
    BatchNorm { xhat: Vec<F>, inv_std: Vec<F> },
    Relu { mask: Vec<bool> },
    MaxPool { argmax: Vec<usize>, in_len: usize },
    GlobalAvgPool { plane: usize },
    Linear { input: Vec<F> },
}

/// Activations retained by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    mode: Mode,
    batch: usize,
    signature: Vec<(usize, usize)>,
    layers: Vec<LayerCache<F>>,
    logits: Vec<F>,
    classes: usize,
}

impl<F: Scalar> ForwardCache<F> {
    pub fn logits(&self) -> &[F] {
        &self.logits
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn signature<F: Scalar>(model: &ModelGraph<F>) -> Vec<(usize, usize)> {
    model
        .layers
        .iter()
        .map(|l| match l {
            Layer::Conv(c) => (c.c_out(), c.c_in()),
            Layer::BatchNorm(b) => (b.channels(), 0),
            Layer::Linear(l) => (l.out_features, l.in_features),
            Layer::MaxPool { kernel, stride } => (*kernel, *stride),
            Layer::Relu => (1, 0),
            Layer::GlobalAvgPool => (2, 0),
        })
        .collect()
}

/// Per-layer gradient tensors, aligned with the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad<F> {
    None,
    Conv { weights: Vec<F>, bias: Option<Vec<F>> },
    BatchNorm { gamma: Vec<F>, beta: Vec<F> },
    Linear { weights: Vec<F>, bias: Option<Vec<F>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub layers: Vec<LayerGrad<F>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient tensors in canonical parameter order (see [`trainable_params_mut`]).
    pub fn tensors(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrad::None => {}
                LayerGrad::Conv { weights, bias } | LayerGrad::Linear { weights, bias } => {
                    out.push(weights);
                    if let Some(b) = bias {
                        out.push(b);
                    }
                }
                LayerGrad::BatchNorm { gamma, beta } => {
                    out.push(gamma);
                    out.push(beta);
                }
            }
        }
        out
    }
}

/// Mutable views of every trainable tensor: conv weights/bias, batch-norm
/// scale/shift, linear weights/bias, in layer order.
pub fn trainable_params_mut<F: Scalar>(model: &mut ModelGraph<F>) -> Vec<&mut Vec<F>> {
    let mut out = Vec::new();
    for layer in &mut model.layers {
        match layer {
            Layer::Conv(c) => {
                out.push(&mut c.weights.data);
                if let Some(b) = &mut c.bias {
                    out.push(b);
                }
            }
            Layer::BatchNorm(b) => {
                out.push(&mut b.gamma);
                out.push(&mut b.beta);
            }
            Layer::Linear(l) => {
                out.push(&mut l.weights);
                if let Some(b) = &mut l.bias {
                    out.push(b);
                }
            }
            _ => {}
        }
    }
    out
}

fn cast<F: Scalar>(x: f64) -> F {
    F::from(x).unwrap()
}

/// Range of output positions `o` with `0 <= o*stride + k - pad < size`.
fn valid_range(out: usize, size: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if size + pad > k { ((size + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn conv_forward_sample<F: Scalar>(conv: &ConvLayer<F>, x: &[F], s: Shape3, o: Shape3, y: &mut [F]) {
    let [c_out, c_in, kh, kw] = conv.weights.shape;
    let (sy, sx) = conv.stride;
    let (py, px) = conv.padding;
    for co in 0..c_out {
        let out = &mut y[co * o.plane()..(co + 1) * o.plane()];
        let b = conv.bias.as_ref().map_or(F::zero(), |b| b[co]);
        out.iter_mut().for_each(|v| *v = b);
        for ci in 0..c_in {
            let inp = &x[ci * s.plane()..(ci + 1) * s.plane()];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(o.height, s.height, ky, py, sy);
                for kx in 0..kw {
                    let w = conv.weights.data[((co * c_in + ci) * kh + ky) * kw + kx];
                    let (ox0, ox1) = valid_range(o.width, s.width, kx, px, sx);
                    for oy in oy0..oy1 {
                        let iy = oy * sy + ky - py;
                        let row = &inp[iy * s.width..(iy + 1) * s.width];
                        let orow = &mut out[oy * o.width..(oy + 1) * o.width];
                        if sx == 1 {
                            let ix0 = ox0 + kx - px;
                            for (ov, &iv) in orow[ox0..ox1].iter_mut().zip(&row[ix0..ix0 + (ox1 - ox0)]) {
                                *ov += w * iv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += w * row[ox * sx + kx - px];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Returns (dx, dw, db) for one sample.
fn conv_backward_sample<F: Scalar>(
    conv: &ConvLayer<F>,
    x: &[F],
    dy: &[F],
    s: Shape3,
    o: Shape3,
    need_dx: bool,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let [c_out, c_in, kh, kw] = conv.weights.shape;
    let (sy, sx) = conv.stride;
    let (py, px) = conv.padding;
    let mut dx = if need_dx { vec![F::zero(); s.len()] } else { Vec::new() };
    let mut dw = vec![F::zero(); conv.weights.data.len()];
    let db: Vec<F> = (0..c_out).map(|co| dy[co * o.plane()..(co + 1) * o.plane()].iter().copied().sum()).collect();
    for co in 0..c_out {
        let g = &dy[co * o.plane()..(co + 1) * o.plane()];
        for ci in 0..c_in {
            let inp = &x[ci * s.plane()..(ci + 1) * s.plane()];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(o.height, s.height, ky, py, sy);
                for kx in 0..kw {
                    let widx = ((co * c_in + ci) * kh + ky) * kw + kx;
                    let w = conv.weights.data[widx];
                    let (ox0, ox1) = valid_range(o.width, s.width, kx, px, sx);
                    let mut acc = F::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * sy + ky - py;
                        let grow = &g[oy * o.width..(oy + 1) * o.width];
                        if sx == 1 {
                            let ix0 = ox0 + kx - px;
                            let len = ox1 - ox0;
                            let gs = &grow[ox0..ox1];
                            let row = &inp[iy * s.width + ix0..iy * s.width + ix0 + len];
                            acc += gs.iter().zip(row).fold(F::zero(), |a, (&gv, &iv)| a + gv * iv);
                            if need_dx {
                                let base = ci * s.plane() + iy * s.width + ix0;
                                dx[base..base + len].iter_mut().zip(gs).for_each(|(d, &gv)| *d += w * gv);
                            }
                            continue;
                        }
                        for ox in ox0..ox1 {
                            let ix = ox * sx + kx - px;
                            let gv = grow[ox];
                            acc += gv * inp[iy * s.width + ix];
                            if need_dx {
                                dx[ci * s.plane() + iy * s.width + ix] += w * gv;
                            }
                        }
                    }
                    dw[widx] = acc;
                }
            }
        }
    }
    (dx, dw, db)
}

fn bn_eval<F: Scalar>(bn: &BatchNormLayer<F>, x: &mut [F], n: usize, plane: usize) {
    let c = bn.channels();
    for s in 0..n {
        for ch in 0..c {
            let scale = bn.gamma[ch] / (bn.running_var[ch] + bn.eps).sqrt();
            let shift = bn.beta[ch] - scale * bn.running_mean[ch];
            for v in &mut x[(s * c + ch) * plane..(s * c + ch + 1) * plane] {
                *v = scale * *v + shift;
            }
        }
    }
}

/// Normalizes with batch statistics (biased variance). Returns
/// (xhat, inv_std, batch mean, unbiased batch variance).
fn bn_train<F: Scalar>(bn: &BatchNormLayer<F>, x: &mut [F], n: usize, plane: usize) -> (Vec<F>, Vec<F>, Vec<F>, Vec<F>) {
    let c = bn.channels();
    let m = n * plane;
    let mf: F = cast(m as f64);
    let mut inv_std = vec![F::zero(); c];
    let mut mean = vec![F::zero(); c];
    let mut var_unbiased = vec![F::zero(); c];
    let mut xhat = vec![F::zero(); x.len()];
    for ch in 0..c {
        let idx = |s: usize| (s * c + ch) * plane..(s * c + ch + 1) * plane;
        let mu = (0..n).map(|s| x[idx(s)].iter().copied().sum::<F>()).sum::<F>() / mf;
        let ss = (0..n).map(|s| x[idx(s)].iter().map(|&v| (v - mu) * (v - mu)).sum::<F>()).sum::<F>();
        let var = ss / mf;
        let istd = F::one() / (var + bn.eps).sqrt();
        for s in 0..n {
            for i in idx(s) {
                let h = (x[i] - mu) * istd;
                xhat[i] = h;
                x[i] = bn.gamma[ch] * h + bn.beta[ch];
            }
        }
        inv_std[ch] = istd;
        mean[ch] = mu;
        var_unbiased[ch] = if m > 1 { ss / cast((m - 1) as f64) } else { var };
    }
    (xhat, inv_std, mean, var_unbiased)
}

fn linear_forward<F: Scalar>(lin: &LinearLayer<F>, x: &[F], n: usize) -> Vec<F> {
    let (o, i) = (lin.out_features, lin.in_features);
    let mut y = vec![F::zero(); n * o];
    for s in 0..n {
        let xs = &x[s * i..(s + 1) * i];
        for r in 0..o {
            let row = &lin.weights[r * i..(r + 1) * i];
            let dot: F = row.iter().zip(xs).map(|(&w, &v)| w * v).sum();
            y[s * o + r] = dot + lin.bias.as_ref().map_or(F::zero(), |b| b[r]);
        }
    }
    y
}

struct Pass<F> {
    logits: Vec<F>,
    cache: Vec<LayerCache<F>>,
    /// (layer, batch mean, unbiased batch variance) for each batch norm in train mode.
    bn_stats: Vec<(usize, Vec<F>, Vec<F>)>,
}

fn run<F: Scalar>(model: &ModelGraph<F>, inputs: &[F], n: usize, mode: Mode) -> Result<Pass<F>, TrainError> {
    let shapes = model.layer_shapes()?;
    if n == 0 || inputs.len() != n * model.input.len() {
        return Err(TrainError::Shape(format!(
            "expected {n} x {} input values, got {}",
            model.input.len(),
            inputs.len()
        )));
    }
    let keep = mode == Mode::Train;
    let mut x = inputs.to_vec();
    let mut s = model.input;
    let mut cache = Vec::new();
    let mut bn_stats = Vec::new();
    for (li, layer) in model.layers.iter().enumerate() {
        let o = shapes[li];
        match layer {
            Layer::Conv(conv) => {
                let mut y = vec![F::zero(); n * o.len()];
                y.par_chunks_mut(o.len())
                    .zip(x.par_chunks(s.len()))
                    .for_each(|(ys, xs)| conv_forward_sample(conv, xs, s, o, ys));
                if keep {
                    cache.push(LayerCache::Conv { input: std::mem::take(&mut x), in_shape: s });
                }
                x = y;
            }
            Layer::BatchNorm(bn) => match mode {
                Mode::Eval => bn_eval(bn, &mut x, n, s.plane()),
                Mode::Train => {
                    let (xhat, inv_std, mean, var) = bn_train(bn, &mut x, n, s.plane());
                    cache.push(LayerCache::BatchNorm { xhat, inv_std });
                    bn_stats.push((li, mean, var));
                }
            },
            Layer::Relu => {
                if keep {
                    cache.push(LayerCache::Relu { mask: x.iter().map(|&v| v > F::zero()).collect() });
                }
                x.iter_mut().for_each(|v| *v = v.max(F::zero()));
            }
            Layer::MaxPool { kernel, stride } => {
                let mut y = vec![F::zero(); n * o.len()];
                let mut argmax = vec![0usize; n * o.len()];
                for sc in 0..n * s.channels {
                    let base = sc * s.plane();
                    for oy in 0..o.height {
                        for ox in 0..o.width {
                            let mut best = base + oy * stride * s.width + ox * stride;
                            for ky in 0..*kernel {
                                for kx in 0..*kernel {
                                    let i = base + (oy * stride + ky) * s.width + ox * stride + kx;
                                    if x[i] > x[best] {
                                        best = i;
                                    }
                                }
                            }
                            let oi = sc * o.plane() + oy * o.width + ox;
                            y[oi] = x[best];
                            argmax[oi] = best;
                        }
                    }
                }
                if keep {
                    cache.push(LayerCache::MaxPool { argmax, in_len: x.len() });
                }
                x = y;
            }
            Layer::GlobalAvgPool => {
                let plane = s.plane();
                let pf: F = cast(plane as f64);
                x = x.chunks(plane).map(|c| c.iter().copied().sum::<F>() / pf).collect();
                if keep {
                    cache.push(LayerCache::GlobalAvgPool { plane });
                }
            }
            Layer::Linear(lin) => {
                let y = linear_forward(lin, &x, n);
                if keep {
                    cache.push(LayerCache::Linear { input: std::mem::take(&mut x) });
                }
                x = y;
            }
        }
        s = o;
    }
    Ok(Pass { logits: x, cache, bn_stats })
}

/// Forward pass. In train mode batch norms normalise with batch statistics
/// and their running statistics are updated with momentum 0.1 (the running
/// variance uses the unbiased estimate).
pub fn forward<F: Scalar>(
    model: &mut ModelGraph<F>,
    inputs: &[F],
    n: usize,
    mode: Mode,
) -> Result<(Vec<F>, ForwardCache<F>), TrainError> {
    let pass = run(model, inputs, n, mode)?;
    let momentum: F = cast(BN_MOMENTUM);
    for (li, mean, var) in &pass.bn_stats {
        if let Layer::BatchNorm(bn) = &mut model.layers[*li] {
            for ch in 0..bn.channels() {
                bn.running_mean[ch] = (F::one() - momentum) * bn.running_mean[ch] + momentum * mean[ch];
                bn.running_var[ch] = (F::one() - momentum) * bn.running_var[ch] + momentum * var[ch];
            }
        }
    }
    let classes = pass.logits.len() / n;
    let cache = ForwardCache {
        mode,
        batch: n,
        signature: signature(model),
        layers: pass.cache,
        logits: pass.logits.clone(),
        classes,
    };
    Ok((pass.logits, cache))
}

/// Eval-mode forward pass without side effects.
pub fn predict<F: Scalar>(model: &ModelGraph<F>, inputs: &[F], n: usize) -> Result<Vec<F>, TrainError> {
    Ok(run(model, inputs, n, Mode::Eval)?.logits)
}

/// Training-mode loss without touching running statistics.
pub fn train_loss<F: Scalar>(model: &ModelGraph<F>, inputs: &[F], labels: &[usize]) -> Result<F, TrainError> {
    let pass = run(model, inputs, labels.len(), Mode::Train)?;
    loss_softmax_ce(&pass.logits, labels)
}

fn check_labels(logits_len: usize, labels: &[usize]) -> Result<usize, TrainError> {
    let n = labels.len();
    if n == 0 || !logits_len.is_multiple_of(n) {
        return Err(TrainError::Shape(format!("{logits_len} logits for {n} labels")));
    }
    let classes = logits_len / n;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TrainError::Label { label: bad, classes });
    }
    Ok(classes)
}

fn softmax_row<F: Scalar>(row: &[F]) -> Vec<F> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
    let z: F = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Mean softmax cross-entropy over the batch, with max subtraction.
pub fn loss_softmax_ce<F: Scalar>(logits: &[F], labels: &[usize]) -> Result<F, TrainError> {
    let classes = check_labels(logits.len(), labels)?;
    let total: F = labels
        .iter()
        .enumerate()
        .map(|(s, &y)| {
            let row = &logits[s * classes..(s + 1) * classes];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            lse - row[y]
        })
        .sum();
    Ok(total / cast(labels.len() as f64))
}

/// Gradient of the mean cross-entropy with respect to every trainable tensor.
pub fn backward<F: Scalar>(
    model: &ModelGraph<F>,
    cache: &ForwardCache<F>,
    labels: &[usize],
) -> Result<Gradients<F>, TrainError> {
    if cache.mode != Mode::Train {
        return Err(TrainError::StaleCache("cache comes from an eval-mode pass".into()));
    }
    if cache.signature != signature(model) {
        return Err(TrainError::StaleCache("model structure changed since the forward pass".into()));
    }
    let n = cache.batch;
    if labels.len() != n {
        return Err(TrainError::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let classes = check_labels(cache.logits.len(), labels)?;
    let nf: F = cast(n as f64);
    let mut dy: Vec<F> = Vec::with_capacity(cache.logits.len());
    for (s, &y) in labels.iter().enumerate() {
        let mut p = softmax_row(&cache.logits[s * classes..(s + 1) * classes]);
        p[y] = p[y] - F::one();
        dy.extend(p.into_iter().map(|v| v / nf));
    }

    let shapes = model.layer_shapes()?;
    let first_param = model.layers.iter().position(|l| matches!(l, Layer::Conv(_) | Layer::Linear(_) | Layer::BatchNorm(_)));
    let mut grads = vec![LayerGrad::None; model.layers.len()];
    let mut caches = cache.layers.iter().rev();
    for li in (0..model.layers.len()).rev() {
        let o = shapes[li];
        let s = if li == 0 { model.input } else { shapes[li - 1] };
        // Input gradients of the first parametrised layer are never needed.
        let need_dx = first_param.is_some_and(|f| li > f);
        let c = caches.next().ok_or_else(|| TrainError::StaleCache("cache shorter than model".into()))?;
        match (&model.layers[li], c) {
            (Layer::Conv(conv), LayerCache::Conv { input, in_shape }) => {
                debug_assert_eq!(*in_shape, s);
                let parts: Vec<(Vec<F>, Vec<F>, Vec<F>)> = input
                    .par_chunks(s.len())
                    .zip(dy.par_chunks(o.len()))
                    .map(|(xs, gs)| conv_backward_sample(conv, xs, gs, s, o, need_dx))
                    .collect();
                let mut dw = vec![F::zero(); conv.weights.data.len()];
                let mut db = vec![F::zero(); conv.c_out()];
                let mut dx = Vec::with_capacity(if need_dx { n * s.len() } else { 0 });
                for (px, pw, pb) in parts {
                    dw.iter_mut().zip(&pw).for_each(|(a, &b)| *a += b);
                    db.iter_mut().zip(&pb).for_each(|(a, &b)| *a += b);
                    dx.extend(px);
                }
                grads[li] = LayerGrad::Conv { weights: dw, bias: conv.bias.as_ref().map(|_| db) };
                dy = dx;
            }
            (Layer::BatchNorm(bn), LayerCache::BatchNorm { xhat, inv_std }) => {
                let ch_n = bn.channels();
                let plane = s.plane();
                let mf: F = cast((n * plane) as f64);
                let mut dgamma = vec![F::zero(); ch_n];
                let mut dbeta = vec![F::zero(); ch_n];
                for ch in 0..ch_n {
                    let idx = |smp: usize| (smp * ch_n + ch) * plane..(smp * ch_n + ch + 1) * plane;
                    for smp in 0..n {
                        for i in idx(smp) {
                            dgamma[ch] += dy[i] * xhat[i];
                            dbeta[ch] += dy[i];
                        }
                    }
                    let k = bn.gamma[ch] * inv_std[ch] / mf;
                    for smp in 0..n {
                        for i in idx(smp) {
                            dy[i] = k * (mf * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                        }
                    }
                }
                grads[li] = LayerGrad::BatchNorm { gamma: dgamma, beta: dbeta };
            }
            (Layer::Relu, LayerCache::Relu { mask }) => {
                dy.iter_mut().zip(mask).for_each(|(g, &m)| {
                    if !m {
                        *g = F::zero();
                    }
                });
            }
            (Layer::MaxPool { .. }, LayerCache::MaxPool { argmax, in_len }) => {
                let mut dx = vec![F::zero(); *in_len];
                for (g, &a) in dy.iter().zip(argmax) {
                    dx[a] += *g;
                }
                dy = dx;
            }
            (Layer::GlobalAvgPool, LayerCache::GlobalAvgPool { plane }) => {
                let pf: F = cast(*plane as f64);
                dy = dy.iter().flat_map(|&g| std::iter::repeat_n(g / pf, *plane)).collect();
            }
            (Layer::Linear(lin), LayerCache::Linear { input }) => {
                let (out_f, in_f) = (lin.out_features, lin.in_features);
                let mut dw = vec![F::zero(); out_f * in_f];
                let mut db = vec![F::zero(); out_f];
                let mut dx = vec![F::zero(); n * in_f];
                for smp in 0..n {
                    let xs = &input[smp * in_f..(smp + 1) * in_f];
                    for r in 0..out_f {
                        let g = dy[smp * out_f + r];
                        db[r] += g;
                        let row = &mut dw[r * in_f..(r + 1) * in_f];
                        row.iter_mut().zip(xs).for_each(|(a, &v)| *a += g * v);
                        if need_dx {
                            let wrow = &lin.weights[r * in_f..(r + 1) * in_f];
                            dx[smp * in_f..(smp + 1) * in_f].iter_mut().zip(wrow).for_each(|(a, &w)| *a += g * w);
                        }
                    }
                }
                grads[li] = LayerGrad::Linear { weights: dw, bias: lin.bias.as_ref().map(|_| db) };
                dy = dx;
            }
            _ => return Err(TrainError::StaleCache(format!("cache entry does not match layer {li}"))),
        }
    }
    Ok(Gradients { layers: grads })
}
