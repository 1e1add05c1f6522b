//! End-to-end embedding, extraction and verification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    self, assemble_bits, decode_rate_clamped, encode_rate, min_channels, rate_to_channel_count, segment, CodecError,
    EmbedParams, SchemeParams, WatermarkPayload,
};
use crate::importance::{applicable, Criterion};
use crate::keystream::KeyStream;
use crate::model::{ModelError, ModelGraph};
use crate::pruner::{
    apply_prune, has_consumer, key_fingerprint, plan_layer, LayerPlan, PruneError, PruningPlan, Receipt,
    ReceiptLayer, ReceiptParams, RECEIPT_FORMAT,
};
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum WatermarkError {
    #[error("{required} segments need {required} marked layers but only {eligible} conv layers are eligible ({} excluded)", excluded.len())]
    Capacity { required: usize, eligible: usize, excluded: Vec<(usize, Exclusion)> },
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error("key does not match the receipt fingerprint")]
    KeyMismatch,
    #[error("architecture mismatch: reference has {reference} conv layers, suspect has {suspect}")]
    ArchitectureMismatch { reference: usize, suspect: usize },
    #[error("length mismatch: expected {expected} bits, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Why a conv layer cannot carry a segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum Exclusion {
    TooNarrow { channels: usize, min_channels: usize },
    NoConsumer,
    CriterionInapplicable,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Eligibility {
    pub eligible: Vec<usize>,
    pub excluded: Vec<(usize, Exclusion)>,
}

/// Conv layers able to carry a segment: wide enough for lossless rate
/// realization, followed by a consumer, and scorable by `criterion`.
pub fn eligible_layers(model: &ModelGraph, params: &EmbedParams, criterion: Criterion) -> Eligibility {
    let c_min = min_channels(params);
    let mut out = Eligibility::default();
    for (conv, &c) in model.channel_counts().iter().enumerate() {
        let reason = if c < c_min {
            Some(Exclusion::TooNarrow { channels: c, min_channels: c_min })
        } else if !has_consumer(model, conv) {
            Some(Exclusion::NoConsumer)
        } else if !applicable(model, conv, criterion) {
            Some(Exclusion::CriterionInapplicable)
        } else {
            None
        };
        match reason {
            Some(r) => out.excluded.push((conv, r)),
            None => out.eligible.push(conv),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EmbedOptions {
    /// Also prune every unselected, prunable layer at a key-stream rate
    /// drawn uniformly from `[p_min, p_max)`.
    pub decoy: bool,
}

#[derive(Debug, Clone)]
pub struct Embedded {
    pub model: ModelGraph,
    pub receipt: Receipt,
    pub eligibility: Eligibility,
    pub plan: PruningPlan,
}

fn check_payload(payload: &WatermarkPayload, params: &EmbedParams) -> Result<(), WatermarkError> {
    params.validate()?;
    if payload.segment_length() != params.segment_length {
        return Err(WatermarkError::ParamMismatch(format!(
            "payload segmented with l = {}, parameters say l = {}",
            payload.segment_length(),
            params.segment_length
        )));
    }
    Ok(())
}

pub fn embed(
    model: &ModelGraph,
    payload: &WatermarkPayload,
    params: &EmbedParams,
    criterion: Criterion,
) -> Result<Embedded, WatermarkError> {
    embed_with(model, payload, params, criterion, EmbedOptions::default())
}

/// Prunes the key-selected layers so their rates carry the payload segments.
pub fn embed_with(
    model: &ModelGraph,
    payload: &WatermarkPayload,
    params: &EmbedParams,
    criterion: Criterion,
    options: EmbedOptions,
) -> Result<Embedded, WatermarkError> {
    check_payload(payload, params)?;
    model.validate()?;
    let values = segment(payload);
    let eligibility = eligible_layers(model, params, criterion);
    if values.len() > eligibility.eligible.len() {
        return Err(WatermarkError::Capacity {
            required: values.len(),
            eligible: eligibility.eligible.len(),
            excluded: eligibility.excluded,
        });
    }
    let mut stream = KeyStream::new(&params.key);
    let selected = codec::select_with_stream(&eligibility.eligible, values.len(), &mut stream)?;
    let counts = model.channel_counts();

    let mut entries = Vec::new();
    let mut layers = Vec::new();
    for (&conv, &d) in selected.iter().zip(&values) {
        let c = counts[conv];
        let target_rate = encode_rate(d, params)?;
        let k = rate_to_channel_count(target_rate, c);
        let retained = plan_layer(model, conv, k, criterion)?;
        entries.push(LayerPlan { conv, target_rate, k, retained });
        layers.push(ReceiptLayer { index: conv, c, c_pruned: c - k, target_rate, realized_rate: k as f64 / c as f64 });
    }
    if options.decoy {
        for conv in 0..counts.len() {
            if selected.contains(&conv) || !has_consumer(model, conv) || !applicable(model, conv, criterion) {
                continue;
            }
            let rate = params.p_min + stream.unit() * (params.p_max - params.p_min);
            let k = rate_to_channel_count(rate, counts[conv]);
            let retained = plan_layer(model, conv, k, criterion)?;
            entries.push(LayerPlan { conv, target_rate: rate, k, retained });
        }
        entries.sort_by_key(|e| e.conv);
    }
    let plan = PruningPlan { criterion, entries };
    let marked = apply_prune(model, &plan)?;
    let receipt = Receipt {
        format: RECEIPT_FORMAT.to_string(),
        params: ReceiptParams {
            scheme: SchemeParams { segment_length: params.segment_length, p_min: params.p_min, p_max: params.p_max },
            criterion,
            conv_layers: counts.len(),
            decoy: options.decoy,
        },
        layers,
        payload_bits: payload.len(),
        key_fingerprint: key_fingerprint(&params.key),
    };
    Ok(Embedded { model: marked, receipt, eligibility, plan })
}

/// What extraction compares the suspect against.
#[derive(Debug, Clone, Copy)]
pub enum Reference<'a> {
    Model(&'a ModelGraph),
    Receipt(&'a Receipt),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReading {
    pub index: usize,
    pub c: usize,
    pub c_suspect: usize,
    pub p_hat: f64,
    pub segment: u32,
    /// False when `p_hat` fell outside `[p_min, p_max)` and was clamped.
    pub in_range: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub bits: Vec<bool>,
    pub layers: Vec<LayerReading>,
}

impl Extraction {
    pub fn warnings(&self) -> impl Iterator<Item = &LayerReading> {
        self.layers.iter().filter(|l| !l.in_range)
    }
}

fn read_layer(index: usize, c: usize, c_suspect: usize, params: &EmbedParams) -> LayerReading {
    let p_hat = (c as f64 - c_suspect as f64) / c as f64;
    let (segment, in_range) = decode_rate_clamped(p_hat, params);
    LayerReading { index, c, c_suspect, p_hat, segment, in_range }
}

/// Recovers `n` payload bits from the channel counts of `suspect`.
pub fn extract(
    reference: Reference<'_>,
    suspect: &ModelGraph,
    params: &EmbedParams,
    n: usize,
    criterion: Criterion,
) -> Result<Extraction, WatermarkError> {
    params.validate()?;
    if n == 0 {
        return Err(CodecError::EmptyPayload.into());
    }
    let m = n.div_ceil(params.segment_length as usize);
    let suspect_counts = suspect.channel_counts();
    let layers: Vec<LayerReading> = match reference {
        Reference::Model(original) => {
            let counts = original.channel_counts();
            if counts.len() != suspect_counts.len() {
                return Err(WatermarkError::ArchitectureMismatch {
                    reference: counts.len(),
                    suspect: suspect_counts.len(),
                });
            }
            let eligibility = eligible_layers(original, params, criterion);
            if m > eligibility.eligible.len() {
                return Err(WatermarkError::Capacity {
                    required: m,
                    eligible: eligibility.eligible.len(),
                    excluded: eligibility.excluded,
                });
            }
            codec::select_layers(&eligibility.eligible, m, &params.key)?
                .into_iter()
                .map(|i| read_layer(i, counts[i], suspect_counts[i], params))
                .collect()
        }
        Reference::Receipt(receipt) => {
            if receipt.key_fingerprint != key_fingerprint(&params.key) {
                return Err(WatermarkError::KeyMismatch);
            }
            let s = &receipt.params.scheme;
            if s.segment_length != params.segment_length || s.p_min != params.p_min || s.p_max != params.p_max {
                return Err(WatermarkError::ParamMismatch(format!(
                    "receipt was made with l = {}, range [{}, {})",
                    s.segment_length, s.p_min, s.p_max
                )));
            }
            if receipt.payload_bits != n {
                return Err(WatermarkError::LengthMismatch { expected: receipt.payload_bits, actual: n });
            }
            if receipt.params.conv_layers != suspect_counts.len() {
                return Err(WatermarkError::ArchitectureMismatch {
                    reference: receipt.params.conv_layers,
                    suspect: suspect_counts.len(),
                });
            }
            if receipt.layers.len() != m {
                return Err(WatermarkError::LengthMismatch { expected: m, actual: receipt.layers.len() });
            }
            receipt.layers.iter().map(|l| read_layer(l.index, l.c, suspect_counts[l.index], params)).collect()
        }
    };
    let values: Vec<u32> = layers.iter().map(|l| l.segment).collect();
    let bits = assemble_bits(&values, params.segment_length, n)?;
    Ok(Extraction { bits, layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Match,
    Mismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub expected: String,
    pub extracted: String,
    pub bit_errors: usize,
    pub ber: f64,
    pub threshold: f64,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerReading>,
}

/// Bit error rate between the expected and extracted watermark; a match
/// when `ber <= threshold`.
pub fn verify(expected: &[bool], extracted: &[bool], threshold: f64) -> Result<VerifyReport, WatermarkError> {
    if expected.len() != extracted.len() {
        return Err(WatermarkError::LengthMismatch { expected: expected.len(), actual: extracted.len() });
    }
    if expected.is_empty() {
        return Err(CodecError::EmptyPayload.into());
    }
    let bit_errors = expected.iter().zip(extracted).filter(|(a, b)| a != b).count();
    let ber = bit_errors as f64 / expected.len() as f64;
    Ok(VerifyReport {
        expected: codec::bits_to_string(expected),
        extracted: codec::bits_to_string(extracted),
        bit_errors,
        ber,
        threshold,
        verdict: if ber <= threshold { Verdict::Match } else { Verdict::Mismatch },
        layers: Vec::new(),
    })
}
