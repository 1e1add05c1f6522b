//! Structural channel pruning and graph rewiring.
//!
//! Removing output channel `j` of a conv layer removes filter `j` (and its
//! bias), entry `j` of every batch norm up to the next consumer, and the
//! matching input slice of that consumer: the next conv's input channel `j`
//! or, for a linear layer, the block of columns fed by channel `j`. ReLU and
//! pooling layers pass channel identity through unchanged.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::SchemeParams;
use crate::importance::{score, Criterion, ImportanceError};
use crate::model::{Layer, ModelError, ModelGraph, Tensor4};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("cannot prune {k} of {c_out} channels: at least one must remain")]
    TooMany { k: usize, c_out: usize },
    #[error("plan does not match model: {0}")]
    PlanMismatch(String),
    #[error("conv {conv} feeds the model output directly; pruning it would change the output shape")]
    Orphan { conv: usize },
    #[error("architecture mismatch: original has {original} conv layers, suspect has {suspect}")]
    ArchitectureMismatch { original: usize, suspect: usize },
    #[error("conv {conv}: suspect has {suspect} channels, more than the original {original}")]
    Inconsistent { conv: usize, original: usize, suspect: usize },
    #[error(transparent)]
    Importance(#[from] ImportanceError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One pruned conv layer: which output channels survive.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    /// Conv ordinal (position in `conv_layer_indices`).
    pub conv: usize,
    pub target_rate: f64,
    pub k: usize,
    /// Surviving channel indices, strictly increasing.
    pub retained: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruningPlan {
    pub criterion: Criterion,
    pub entries: Vec<LayerPlan>,
}

/// Channels kept when dropping the `k` lowest-scoring ones. Ties keep the
/// lower channel index. The result is in ascending channel order.
pub fn plan_layer(model: &ModelGraph, conv: usize, k: usize, criterion: Criterion) -> Result<Vec<usize>, PruneError> {
    let scores = score(model, conv, criterion)?.scores;
    retain_top(&scores, k)
}

pub(crate) fn retain_top(scores: &[f64], k: usize) -> Result<Vec<usize>, PruneError> {
    let c_out = scores.len();
    if k >= c_out {
        return Err(PruneError::TooMany { k, c_out });
    }
    let mut order: Vec<usize> = (0..c_out).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..c_out - k].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Whether conv `conv` has a downstream consumer (conv or linear) that can absorb
/// a change in its channel count.
pub fn has_consumer(model: &ModelGraph, conv: usize) -> bool {
    model.conv_position(conv).is_ok_and(|pos| {
        model.layers[pos + 1..].iter().any(|l| matches!(l, Layer::Conv(_) | Layer::Linear(_)))
    })
}

fn gather<T: Copy>(v: &[T], keep: &[usize]) -> Vec<T> {
    keep.iter().map(|&i| v[i]).collect()
}

/// Returns a new graph with every planned layer pruned and rewired.
pub fn apply_prune(model: &ModelGraph, plan: &PruningPlan) -> Result<ModelGraph, PruneError> {
    let positions = model.conv_layer_indices();
    let mut seen = vec![false; positions.len()];
    for e in &plan.entries {
        let &pos = positions
            .get(e.conv)
            .ok_or_else(|| PruneError::PlanMismatch(format!("conv {} does not exist", e.conv)))?;
        if std::mem::replace(&mut seen[e.conv], true) {
            return Err(PruneError::PlanMismatch(format!("conv {} planned twice", e.conv)));
        }
        let Layer::Conv(conv) = &model.layers[pos] else { unreachable!() };
        let c_out = conv.c_out();
        if e.retained.is_empty() {
            return Err(PruneError::TooMany { k: c_out, c_out });
        }
        if !e.retained.windows(2).all(|w| w[0] < w[1]) || e.retained.last().is_some_and(|&r| r >= c_out) {
            return Err(PruneError::PlanMismatch(format!(
                "retained list of conv {} must be strictly increasing and below {c_out}",
                e.conv
            )));
        }
        if e.retained.len() + e.k != c_out {
            return Err(PruneError::PlanMismatch(format!(
                "conv {}: k = {} but {} of {c_out} channels retained",
                e.conv,
                e.k,
                e.retained.len()
            )));
        }
    }

    let shapes = model.layer_shapes()?;
    let mut out = model.clone();
    for e in &plan.entries {
        if e.k == 0 {
            continue;
        }
        let pos = positions[e.conv];
        let keep = &e.retained;
        if let Layer::Conv(conv) = &mut out.layers[pos] {
            let n = conv.weights.filter_len();
            let data = keep.iter().flat_map(|&j| conv.weights.data[j * n..(j + 1) * n].iter().copied()).collect();
            let [_, c_in, kh, kw] = conv.weights.shape;
            conv.weights = Tensor4 { shape: [keep.len(), c_in, kh, kw], data };
            if let Some(b) = &mut conv.bias {
                *b = gather(b, keep);
            }
        }
        let mut consumed = false;
        for j in pos + 1..out.layers.len() {
            match &mut out.layers[j] {
                Layer::BatchNorm(bn) => {
                    bn.gamma = gather(&bn.gamma, keep);
                    bn.beta = gather(&bn.beta, keep);
                    bn.running_mean = gather(&bn.running_mean, keep);
                    bn.running_var = gather(&bn.running_var, keep);
                }
                Layer::Relu | Layer::MaxPool { .. } | Layer::GlobalAvgPool => {}
                Layer::Conv(next) => {
                    let [c_out, c_in, kh, kw] = next.weights.shape;
                    let plane = kh * kw;
                    let mut data = Vec::with_capacity(c_out * keep.len() * plane);
                    for o in 0..c_out {
                        for &i in keep {
                            let start = (o * c_in + i) * plane;
                            data.extend_from_slice(&next.weights.data[start..start + plane]);
                        }
                    }
                    next.weights = Tensor4 { shape: [c_out, keep.len(), kh, kw], data };
                    consumed = true;
                    break;
                }
                Layer::Linear(lin) => {
                    // Features arrive flattened as (channel, h, w).
                    let plane = shapes[j - 1].plane();
                    let mut weights = Vec::with_capacity(lin.out_features * keep.len() * plane);
                    for o in 0..lin.out_features {
                        let row = &lin.weights[o * lin.in_features..(o + 1) * lin.in_features];
                        for &i in keep {
                            weights.extend_from_slice(&row[i * plane..(i + 1) * plane]);
                        }
                    }
                    lin.weights = weights;
                    lin.in_features = keep.len() * plane;
                    consumed = true;
                    break;
                }
            }
        }
        if !consumed {
            return Err(PruneError::Orphan { conv: e.conv });
        }
    }
    out.validate()?;
    Ok(out)
}

/// Observed pruning rate `(c - c') / c` of every conv layer.
pub fn observed_rates(original: &ModelGraph, suspect: &ModelGraph) -> Result<Vec<f64>, PruneError> {
    rates_from_counts(&original.channel_counts(), &suspect.channel_counts())
}

pub fn rates_from_counts(original: &[usize], suspect: &[usize]) -> Result<Vec<f64>, PruneError> {
    if original.len() != suspect.len() {
        return Err(PruneError::ArchitectureMismatch { original: original.len(), suspect: suspect.len() });
    }
    original
        .iter()
        .zip(suspect)
        .enumerate()
        .map(|(conv, (&c, &c2))| {
            if c2 > c {
                Err(PruneError::Inconsistent { conv, original: c, suspect: c2 })
            } else {
                Ok((c - c2) as f64 / c as f64)
            }
        })
        .collect()
}

pub const RECEIPT_FORMAT: &str = "nnwm-receipt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiptParams {
    #[serde(flatten)]
    pub scheme: SchemeParams,
    pub criterion: Criterion,
    /// Total number of conv layers `t` in the original model.
    pub conv_layers: usize,
    #[serde(default)]
    pub decoy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiptLayer {
    /// Conv ordinal `s_i`.
    pub index: usize,
    pub c: usize,
    pub c_pruned: usize,
    pub target_rate: f64,
    pub realized_rate: f64,
}

/// Portable record of the original channel counts of the marked layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub format: String,
    pub params: ReceiptParams,
    pub layers: Vec<ReceiptLayer>,
    pub payload_bits: usize,
    pub key_fingerprint: String,
}

impl Receipt {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("receipt serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let r: Receipt = serde_json::from_str(text).map_err(|e| ModelError::Manifest(format!("receipt: {e}")))?;
        if r.format != RECEIPT_FORMAT {
            return Err(ModelError::Manifest(format!("receipt format {:?}, expected {RECEIPT_FORMAT:?}", r.format)));
        }
        Ok(r)
    }
}

/// Publishable key fingerprint. Domain-separated from the selection seed
/// (`SHA-256(key)`) so that publishing it does not reveal the key stream.
pub fn key_fingerprint(key: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(b"nnwm-receipt-fingerprint-v1\0");
    h.update(key);
    hex::encode(h.finalize())
}
