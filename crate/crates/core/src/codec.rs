//! Watermark arithmetic: bit segmentation, quantized pruning-rate
//! encoding/decoding, keyed layer selection and capacity accounting.
//!
//! A payload of `n` bits is split into `m = ceil(n / l)` segments of `l`
//! bits (zero padded at the end). Segment value `d` maps to the centre of
//! the `d`-th of `2^l` equal cells partitioning `[p_min, p_max)`; decoding
//! floors an observed rate back to its cell.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keystream::KeyStream;

pub const DEFAULT_P_MIN: f64 = 0.0;
pub const DEFAULT_P_MAX: f64 = 0.7;

/// Largest supported segment length.
pub const MAX_SEGMENT_BITS: u32 = 16;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("watermark payload is empty")]
    EmptyPayload,
    #[error("invalid embedding parameters: {0}")]
    InvalidParams(String),
    #[error("segment value {d} outside [0, {levels})")]
    SegmentOutOfRange { d: u32, levels: u32 },
    #[error("observed rate {p} outside [{p_min}, {p_max})")]
    RateOutOfRange { p: f64, p_min: f64, p_max: f64 },
    #[error("insufficient capacity: {required} layers required, {available} eligible")]
    Capacity { required: usize, available: usize },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("cannot parse payload: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WatermarkPayload {
    bits: Vec<bool>,
    segment_length: u32,
}

impl WatermarkPayload {
    pub fn new(bits: Vec<bool>, segment_length: u32) -> Result<Self, CodecError> {
        if bits.is_empty() {
            return Err(CodecError::EmptyPayload);
        }
        check_segment_length(segment_length)?;
        Ok(Self { bits, segment_length })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn segment_length(&self) -> u32 {
        self.segment_length
    }

    /// Number of segments `m = ceil(n / l)`.
    pub fn segments(&self) -> usize {
        self.bits.len().div_ceil(self.segment_length as usize)
    }
}

fn check_segment_length(l: u32) -> Result<(), CodecError> {
    if l == 0 || l > MAX_SEGMENT_BITS {
        return Err(CodecError::InvalidParams(format!("segment length {l} outside 1..={MAX_SEGMENT_BITS}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedParams {
    pub p_min: f64,
    pub p_max: f64,
    pub segment_length: u32,
    pub key: Vec<u8>,
    pub r_cov: Option<f64>,
}

impl EmbedParams {
    pub fn new(p_min: f64, p_max: f64, segment_length: u32, key: impl Into<Vec<u8>>) -> Result<Self, CodecError> {
        let params = Self { p_min, p_max, segment_length, key: key.into(), r_cov: None };
        params.validate()?;
        Ok(params)
    }

    /// Range `[0, 0.7)`.
    pub fn with_defaults(segment_length: u32, key: impl Into<Vec<u8>>) -> Result<Self, CodecError> {
        Self::new(DEFAULT_P_MIN, DEFAULT_P_MAX, segment_length, key)
    }

    pub fn with_r_cov(mut self, r_cov: f64) -> Result<Self, CodecError> {
        if !(r_cov > 0.0 && r_cov <= 1.0) {
            return Err(CodecError::InvalidParams(format!("r_cov {r_cov} outside (0, 1]")));
        }
        self.r_cov = Some(r_cov);
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        check_segment_length(self.segment_length)?;
        if !(self.p_min >= 0.0 && self.p_min < self.p_max && self.p_max <= 1.0) {
            return Err(CodecError::InvalidParams(format!(
                "rate range [{}, {}) must satisfy 0 <= p_min < p_max <= 1",
                self.p_min, self.p_max
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> u32 {
        1 << self.segment_length
    }

    /// Cell width `(p_max - p_min) / 2^l`.
    pub fn delta(&self) -> f64 {
        (self.p_max - self.p_min) / f64::from(self.levels())
    }

    pub fn grid(&self) -> QuantizerGrid {
        QuantizerGrid { levels: (0..self.levels()).map(|d| self.p_min + (f64::from(d) + 0.5) * self.delta()).collect() }
    }
}

/// Cell centres `a_i = p_min + (i + 0.5) * delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerGrid {
    pub levels: Vec<f64>,
}

impl QuantizerGrid {
    pub fn mean(&self) -> f64 {
        self.levels.iter().sum::<f64>() / self.levels.len() as f64
    }
}

/// Decimal values of the `l`-bit segments, most significant bit first.
pub fn segment(payload: &WatermarkPayload) -> Vec<u32> {
    let l = payload.segment_length as usize;
    (0..payload.segments())
        .map(|i| {
            (0..l).fold(0u32, |acc, j| {
                let bit = payload.bits.get(i * l + j).copied().unwrap_or(false);
                (acc << 1) | u32::from(bit)
            })
        })
        .collect()
}

/// Inverse of [`segment`], truncated to the original length `n`.
pub fn assemble_bits(values: &[u32], segment_length: u32, n: usize) -> Result<Vec<bool>, CodecError> {
    check_segment_length(segment_length)?;
    let l = segment_length as usize;
    let m = n.div_ceil(l);
    if values.len() != m {
        return Err(CodecError::LengthMismatch { expected: m, actual: values.len() });
    }
    let levels = 1u32 << segment_length;
    let mut bits = Vec::with_capacity(m * l);
    for &d in values {
        if d >= levels {
            return Err(CodecError::SegmentOutOfRange { d, levels });
        }
        bits.extend((0..l).rev().map(|j| (d >> j) & 1 == 1));
    }
    bits.truncate(n);
    Ok(bits)
}

/// Target pruning rate for segment value `d`: the centre of cell `d`.
pub fn encode_rate(d: u32, params: &EmbedParams) -> Result<f64, CodecError> {
    let levels = params.levels();
    if d >= levels {
        return Err(CodecError::SegmentOutOfRange { d, levels });
    }
    Ok(params.p_min + (f64::from(d) + 0.5) * params.delta())
}

/// Cell index of an observed rate. Rates outside `[p_min, p_max)` are an error.
pub fn decode_rate(p_hat: f64, params: &EmbedParams) -> Result<u32, CodecError> {
    match decode_rate_clamped(p_hat, params) {
        (d, true) => Ok(d),
        (_, false) => Err(CodecError::RateOutOfRange { p: p_hat, p_min: params.p_min, p_max: params.p_max }),
    }
}

/// Like [`decode_rate`] but clamps out-of-range rates to the nearest cell and
/// reports whether the rate was in range.
pub fn decode_rate_clamped(p_hat: f64, params: &EmbedParams) -> (u32, bool) {
    let top = params.levels() - 1;
    if !(p_hat >= params.p_min) {
        return (0, false);
    }
    if p_hat >= params.p_max {
        return (top, false);
    }
    let cell = ((p_hat - params.p_min) / params.delta()).floor();
    ((cell as u32).min(top), true)
}

/// Number of channels to remove from a layer of `c` channels to realize rate
/// `p`: `round_half_up(p * c)`, capped at `c - 1`.
pub fn rate_to_channel_count(p: f64, c: usize) -> usize {
    if c == 0 {
        return 0;
    }
    let k = (p * c as f64 + 0.5).floor().max(0.0) as usize;
    k.min(c - 1)
}

/// Smallest layer width for which every segment value survives the integer
/// realization: `floor(1 / delta) + 1`.
pub fn min_channels(params: &EmbedParams) -> usize {
    (1.0 / params.delta()).floor() as usize + 1
}

/// Keyed choice of `m` layers from `eligible`: the first `m` entries of a
/// key-stream Fisher-Yates permutation, returned in ascending order. Segment
/// `i` is carried by the `i`-th returned layer.
pub fn select_layers(eligible: &[usize], m: usize, key: &[u8]) -> Result<Vec<usize>, CodecError> {
    select_with_stream(eligible, m, &mut KeyStream::new(key))
}

pub(crate) fn select_with_stream(
    eligible: &[usize],
    m: usize,
    stream: &mut KeyStream,
) -> Result<Vec<usize>, CodecError> {
    if m > eligible.len() {
        return Err(CodecError::Capacity { required: m, available: eligible.len() });
    }
    let mut order = eligible.to_vec();
    stream.shuffle(&mut order);
    let mut chosen = order[..m].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Number of covered layers for a coverage ratio: `round_half_up(t * r_cov)`.
pub fn covered_layers(t: usize, r_cov: f64) -> usize {
    (t as f64 * r_cov + 0.5).floor() as usize
}

/// Watermarking channel rate `N = l * round_half_up(t * r_cov)` in bits.
pub fn capacity(t: usize, segment_length: u32, r_cov: f64) -> usize {
    segment_length as usize * covered_layers(t, r_cov)
}

/// Parses a payload given as a binary string (`10110`), hex (`0x1f`, MSB
/// first, four bits per digit) or raw bytes.
pub fn parse_bits(text: &str) -> Result<Vec<bool>, CodecError> {
    let t = text.trim();
    if let Some(hex) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        if hex.is_empty() {
            return Err(CodecError::EmptyPayload);
        }
        return hex
            .chars()
            .map(|c| c.to_digit(16).ok_or_else(|| CodecError::Parse(format!("invalid hex digit {c:?}"))))
            .collect::<Result<Vec<u32>, _>>()
            .map(|digits| digits.into_iter().flat_map(|v| (0..4).rev().map(move |j| (v >> j) & 1 == 1)).collect());
    }
    if t.is_empty() {
        return Err(CodecError::EmptyPayload);
    }
    t.chars()
        .filter(|c| !c.is_whitespace() && *c != '_')
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(CodecError::Parse(format!("invalid bit {other:?}"))),
        })
        .collect()
}

pub fn bytes_to_bits(bytes: &[u8]) -> Vec<bool> {
    bytes.iter().flat_map(|b| (0..8).rev().map(move |j| (b >> j) & 1 == 1)).collect()
}

pub fn bits_to_string(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Serializable form of the scheme parameters (the key is never stored).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeParams {
    pub segment_length: u32,
    pub p_min: f64,
    pub p_max: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(s: &str) -> Vec<bool> {
        parse_bits(s).unwrap()
    }

    fn params(l: u32) -> EmbedParams {
        EmbedParams::with_defaults(l, b"k".to_vec()).unwrap()
    }

    #[test]
    fn segment_examples() {
        assert_eq!(segment(&WatermarkPayload::new(bits("10110"), 2).unwrap()), vec![2, 3, 0]);
        assert_eq!(segment(&WatermarkPayload::new(bits("111"), 3).unwrap()), vec![7]);
        assert_eq!(segment(&WatermarkPayload::new(bits("101"), 1).unwrap()), vec![1, 0, 1]);
    }

    #[test]
    fn empty_payload_rejected() {
        assert_eq!(WatermarkPayload::new(vec![], 3), Err(CodecError::EmptyPayload));
        assert_eq!(parse_bits(""), Err(CodecError::EmptyPayload));
    }

    #[test]
    fn assemble_examples() {
        assert_eq!(assemble_bits(&[2, 3, 0], 2, 5).unwrap(), bits("10110"));
        assert_eq!(assemble_bits(&[5], 3, 3).unwrap(), bits("101"));
        assert_eq!(
            assemble_bits(&[2, 3], 2, 5),
            Err(CodecError::LengthMismatch { expected: 3, actual: 2 })
        );
        assert_eq!(assemble_bits(&[8], 3, 3), Err(CodecError::SegmentOutOfRange { d: 8, levels: 8 }));
    }

    #[test]
    fn encode_examples() {
        // 0 + (5 + 0.5) * 0.7 / 8
        let p = params(3);
        assert!((p.delta() - 0.0875).abs() < 1e-15);
        assert!((encode_rate(5, &p).unwrap() - 0.48125).abs() < 1e-12);
        let p1 = params(1);
        assert!((encode_rate(0, &p1).unwrap() - 0.175).abs() < 1e-12);
        assert!((encode_rate(1, &p1).unwrap() - 0.525).abs() < 1e-12);
        assert_eq!(encode_rate(8, &p), Err(CodecError::SegmentOutOfRange { d: 8, levels: 8 }));
    }

    #[test]
    fn grid_mean_is_range_midpoint() {
        for l in 1..=8 {
            let p = params(l);
            assert!((p.grid().mean() - 0.35).abs() < 1e-12);
            let mean_enc: f64 =
                (0..p.levels()).map(|d| encode_rate(d, &p).unwrap()).sum::<f64>() / f64::from(p.levels());
            assert!((mean_enc - 0.35).abs() < 1e-12);
        }
        let q = EmbedParams::new(0.1, 0.5, 3, vec![]).unwrap();
        assert!((q.grid().mean() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn grid_strictly_increasing() {
        for l in 1..=8 {
            let g = params(l).grid();
            assert!(g.levels.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn decode_examples() {
        let p = params(3);
        // floor(0.484375 / 0.0875) = floor(5.5357) = 5
        assert_eq!(decode_rate(0.484375, &p), Ok(5));
        for d in 0..p.levels() {
            assert_eq!(decode_rate(encode_rate(d, &p).unwrap(), &p), Ok(d));
        }
        assert!(matches!(decode_rate(0.7, &p), Err(CodecError::RateOutOfRange { .. })));
        assert!(matches!(decode_rate(-0.01, &p), Err(CodecError::RateOutOfRange { .. })));
        assert_eq!(decode_rate_clamped(0.7, &p), (7, false));
        assert_eq!(decode_rate_clamped(0.0, &p), (0, true));
    }

    #[test]
    fn boundary_decodes_downward() {
        let p = EmbedParams::new(0.0, 1.0, 2, vec![]).unwrap();
        // 0.25 and 0.5 are exact cell boundaries in binary floating point.
        assert_eq!(decode_rate(0.25, &p), Ok(1));
        assert_eq!(decode_rate(0.5, &p), Ok(2));
        assert_eq!(decode_rate(0.25 - 1e-12, &p), Ok(0));
    }

    #[test]
    fn rate_to_count_examples() {
        let p = params(3);
        // 0.48125 * 64 = 30.8 -> 31; 31 / 64 = 0.484375 -> cell 5.
        let k = rate_to_channel_count(0.48125, 64);
        assert_eq!(k, 31);
        assert_eq!(decode_rate(k as f64 / 64.0, &p), Ok(5));
        // 0.04375 * 12 = 0.525 -> 1; 1 / 12 = 0.0833 -> cell 0.
        let k = rate_to_channel_count(0.04375, 12);
        assert_eq!(k, 1);
        assert_eq!(decode_rate(1.0 / 12.0, &p), Ok(0));
        assert_eq!(rate_to_channel_count(0.0, 37), 0);
        assert_eq!(rate_to_channel_count(0.99, 3), 2);
    }

    #[test]
    fn min_channel_examples() {
        assert_eq!(min_channels(&params(3)), 12);
        assert_eq!(min_channels(&params(1)), 3);
        assert_eq!(min_channels(&EmbedParams::new(0.0, 1.0, 2, vec![]).unwrap()), 5);
    }

    #[test]
    fn capacity_known_values() {
        assert_eq!(capacity(162, 2, 0.4), 130);
        assert_eq!(capacity(39, 3, 0.6), 69);
        assert_eq!(capacity(16, 3, 1.0), 48);
        assert_eq!(capacity(162, 1, 0.4), 65);
        assert_eq!(capacity(162, 3, 0.8), 390);
    }

    #[test]
    fn invalid_params() {
        assert!(EmbedParams::new(0.5, 0.5, 3, vec![]).is_err());
        assert!(EmbedParams::new(-0.1, 0.5, 3, vec![]).is_err());
        assert!(EmbedParams::new(0.0, 1.1, 3, vec![]).is_err());
        assert!(EmbedParams::new(0.0, 0.7, 0, vec![]).is_err());
        assert!(params(3).with_r_cov(0.0).is_err());
        assert!(params(3).with_r_cov(1.0).is_ok());
    }

    #[test]
    fn select_reference_values() {
        // Frozen from tests/oracles/keystream.py.
        let all: Vec<usize> = (0..16).collect();
        assert_eq!(select_layers(&all, 8, b"k1").unwrap(), vec![0, 4, 8, 10, 12, 13, 14, 15]);
        assert_eq!(select_layers(&all, 8, b"k2").unwrap(), vec![1, 2, 6, 8, 10, 13, 14, 15]);
        assert_eq!(select_layers(&all, 5, b"owner-secret").unwrap(), vec![0, 3, 5, 9, 13]);
        assert_eq!(select_layers(&[0, 2, 3, 7, 9, 12], 3, b"k1").unwrap(), vec![2, 3, 9]);
    }

    #[test]
    fn select_everything_and_determinism() {
        let eligible = [1, 4, 5, 9];
        assert_eq!(select_layers(&eligible, 4, b"any").unwrap(), vec![1, 4, 5, 9]);
        assert_eq!(select_layers(&eligible, 2, b"same").unwrap(), select_layers(&eligible, 2, b"same").unwrap());
        assert_eq!(select_layers(&eligible, 5, b"k"), Err(CodecError::Capacity { required: 5, available: 4 }));
    }

    #[test]
    fn selection_is_unbiased() {
        // Chi-square on which element lands first, 4 candidates, 10^4 keys.
        let eligible = [0usize, 1, 2, 3];
        let mut counts = [0f64; 4];
        for i in 0..10_000u32 {
            let chosen = select_layers(&eligible, 1, &i.to_le_bytes()).unwrap();
            counts[chosen[0]] += 1.0;
        }
        let expected = 2500.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 3 dof, p = 0.001 critical value.
        assert!(chi2 < 16.27, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn parse_formats() {
        assert_eq!(parse_bits("0xA1").unwrap(), bits("10100001"));
        assert_eq!(parse_bits("1010_1100").unwrap(), bits("10101100"));
        assert!(parse_bits("10a").is_err());
        assert_eq!(bytes_to_bits(&[0x80, 0x01]), bits("1000000000000001"));
        assert_eq!(bits_to_string(&bits("0110")), "0110");
    }

    proptest! {
        #[test]
        fn segment_assemble_inverse(raw in prop::collection::vec(any::<bool>(), 1..80), l in 1u32..=6) {
            let payload = WatermarkPayload::new(raw.clone(), l).unwrap();
            let d = segment(&payload);
            prop_assert_eq!(d.len(), raw.len().div_ceil(l as usize));
            prop_assert!(d.iter().all(|&v| v < (1 << l)));
            prop_assert_eq!(assemble_bits(&d, l, raw.len()).unwrap(), raw);
        }

        #[test]
        fn encode_strictly_increasing(l in 1u32..=8, pmin in 0.0f64..0.5, width in 0.05f64..0.5) {
            let p = EmbedParams::new(pmin, pmin + width, l, vec![]).unwrap();
            let rates: Vec<f64> = (0..p.levels()).map(|d| encode_rate(d, &p).unwrap()).collect();
            prop_assert!(rates.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(rates.iter().all(|&r| r >= p.p_min && r < p.p_max));
        }
    }

    /// Exhaustive check over short payloads: every bit string of length 1..=10
    /// survives segment -> assemble for every l.
    #[test]
    fn segment_assemble_exhaustive_short() {
        for n in 1..=10usize {
            for v in 0u32..(1 << n) {
                let raw: Vec<bool> = (0..n).map(|j| (v >> j) & 1 == 1).collect();
                for l in 1..=4 {
                    let d = segment(&WatermarkPayload::new(raw.clone(), l).unwrap());
                    assert_eq!(assemble_bits(&d, l, n).unwrap(), raw);
                }
            }
        }
    }
}
