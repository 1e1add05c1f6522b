//! Minimal CPU training loop for the fixture CNN family: plain SGD with
//! weight decay, seeded shuffling, and per-epoch metrics.

mod data;
mod engine;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelGraph, Shape3};

pub use data::{synth_dataset, SYNTH_CLASSES, SYNTH_NOISE_STD};
pub use engine::{
    backward, forward, loss_softmax_ce, predict, train_loss, trainable_params_mut, ForwardCache, Gradients,
    LayerGrad, Mode, Scalar, BN_MOMENTUM,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("stale forward cache: {0}")]
    StaleCache(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    /// Fine-tuning defaults: lr 0.001, weight decay 1e-4.
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, lr: 0.001, weight_decay: 1e-4, seed: 0, precision: Precision::F32 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config("weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Labelled images, `(N, C, H, W)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f32>,
    pub shape: Shape3,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.shape.len();
        &self.inputs[i * n..(i + 1) * n]
    }

    fn gather<F: Scalar>(&self, idx: &[usize]) -> (Vec<F>, Vec<usize>) {
        let x = idx.iter().flat_map(|&i| self.sample(i).iter().map(|&v| F::from(v).unwrap())).collect();
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Batch,
    pub test: Batch,
    pub classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

/// `epoch,train_loss,test_accuracy` rows with a header line.
pub fn history_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,test_accuracy\n");
    for m in history {
        s.push_str(&format!("{},{},{}\n", m.epoch, m.train_loss, m.test_accuracy));
    }
    s
}

/// `w <- w - lr * (g + weight_decay * w)` for every trainable tensor.
pub fn sgd_step<F: Scalar>(model: &mut ModelGraph<F>, grads: &Gradients<F>, config: &TrainConfig) -> Result<(), TrainError> {
    let lr = F::from(config.lr).unwrap();
    let wd = F::from(config.weight_decay).unwrap();
    let g = grads.tensors();
    let params = trainable_params_mut(model);
    if g.len() != params.len() {
        return Err(TrainError::Shape(format!("{} gradient tensors for {} parameters", g.len(), params.len())));
    }
    if let Some((i, _)) = params.iter().zip(&g).enumerate().find(|(_, (p, g))| p.len() != g.len()) {
        return Err(TrainError::Shape(format!("gradient tensor {i} has the wrong length")));
    }
    for (p, g) in params.into_iter().zip(g) {
        for (w, &d) in p.iter_mut().zip(g) {
            *w = *w - lr * (d + wd * *w);
        }
    }
    Ok(())
}

const EVAL_CHUNK: usize = 256;

/// Fraction of correctly classified samples, eval mode.
pub fn accuracy<F: Scalar>(model: &ModelGraph<F>, data: &Batch) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.gather::<F>(chunk);
        let logits = predict(model, &x, chunk.len())?;
        let classes = logits.len() / chunk.len();
        for (s, &label) in y.iter().enumerate() {
            let row = &logits[s * classes..(s + 1) * classes];
            let best = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn train_generic<F: Scalar>(
    model: &ModelGraph,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelGraph, Vec<EpochMetrics>), TrainError> {
    let mut net: ModelGraph<F> = model.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            // A single sample has no batch statistics to normalise with.
            if chunk.len() < 2 && data.train.len() >= 2 {
                continue;
            }
            let (x, y) = data.train.gather::<F>(chunk);
            let (logits, cache) = forward(&mut net, &x, chunk.len(), Mode::Train)?;
            let loss = loss_softmax_ce(&logits, &y)?;
            let grads = backward(&net, &cache, &y)?;
            sgd_step(&mut net, &grads, config)?;
            loss_sum += loss.to_f64().unwrap() * chunk.len() as f64;
            seen += chunk.len();
        }
        history.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            test_accuracy: accuracy(&net, &data.test)?,
        });
    }
    let out = if config.epochs == 0 { model.clone() } else { net.cast() };
    Ok((out, history))
}

/// Shuffled mini-batch SGD for `config.epochs` epochs. Never changes the
/// architecture; with zero epochs the model is returned unchanged.
pub fn finetune(
    model: &ModelGraph,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelGraph, Vec<EpochMetrics>), TrainError> {
    config.validate()?;
    model.validate()?;
    if data.train.shape != model.input {
        return Err(TrainError::Shape(format!("dataset images {:?} vs model input {:?}", data.train.shape, model.input)));
    }
    match config.precision {
        Precision::F32 => train_generic::<f32>(model, data, config),
        Precision::F64 => train_generic::<f64>(model, data, config),
    }
}
