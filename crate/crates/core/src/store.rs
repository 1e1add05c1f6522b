//! On-disk container: a JSON architecture manifest plus a little-endian
//! binary32 weight blob.
//!
//! The blob starts with the 4-byte magic `NNWM` and a `u32` version (1),
//! followed by every tensor in layer order with no padding. Offsets are
//! derived from the manifest shapes; nothing else is stored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{
    BatchNormLayer, ConvLayer, Layer, LinearLayer, ModelError, ModelGraph, Shape3, Tensor4, DEFAULT_BN_EPS,
};

pub const MANIFEST_FORMAT: &str = "nnwm-v1";
pub const BLOB_MAGIC: [u8; 4] = *b"NNWM";
pub const BLOB_VERSION: u32 = 1;
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub name: String,
    pub input: [usize; 3],
    pub layers: Vec<LayerRecord>,
}

fn one_one() -> [usize; 2] {
    [1, 1]
}

fn default_eps() -> f32 {
    DEFAULT_BN_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerRecord {
    Conv2d {
        out_channels: usize,
        in_channels: usize,
        kernel: [usize; 2],
        #[serde(default = "one_one")]
        stride: [usize; 2],
        #[serde(default)]
        padding: [usize; 2],
        #[serde(default)]
        bias: bool,
    },
    Batchnorm {
        channels: usize,
        #[serde(default = "default_eps")]
        eps: f32,
    },
    Relu,
    Maxpool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Linear {
        out: usize,
        #[serde(rename = "in")]
        in_features: usize,
        #[serde(default)]
        bias: bool,
    },
}

impl LayerRecord {
    /// Number of f32 values this layer occupies in the blob.
    fn tensor_len(&self) -> usize {
        match *self {
            LayerRecord::Conv2d { out_channels, in_channels, kernel, bias, .. } => {
                out_channels * in_channels * kernel[0] * kernel[1] + if bias { out_channels } else { 0 }
            }
            LayerRecord::Batchnorm { channels, .. } => 4 * channels,
            LayerRecord::Linear { out, in_features, bias } => out * in_features + if bias { out } else { 0 },
            _ => 0,
        }
    }
}

impl Manifest {
    pub fn from_model(model: &ModelGraph) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => LayerRecord::Conv2d {
                    out_channels: c.c_out(),
                    in_channels: c.c_in(),
                    kernel: [c.weights.shape[2], c.weights.shape[3]],
                    stride: [c.stride.0, c.stride.1],
                    padding: [c.padding.0, c.padding.1],
                    bias: c.bias.is_some(),
                },
                Layer::BatchNorm(b) => LayerRecord::Batchnorm { channels: b.channels(), eps: b.eps },
                Layer::Relu => LayerRecord::Relu,
                Layer::MaxPool { kernel, stride } => LayerRecord::Maxpool { kernel: *kernel, stride: *stride },
                Layer::GlobalAvgPool => LayerRecord::GlobalAvgPool,
                Layer::Linear(l) => {
                    LayerRecord::Linear { out: l.out_features, in_features: l.in_features, bias: l.bias.is_some() }
                }
            })
            .collect();
        Manifest {
            format: MANIFEST_FORMAT.to_string(),
            name: model.name.clone(),
            input: [model.input.channels, model.input.height, model.input.width],
            layers,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| ModelError::Manifest(e.to_string()))?;
        if m.format != MANIFEST_FORMAT {
            return Err(ModelError::Manifest(format!("format {:?}, expected {MANIFEST_FORMAT:?}", m.format)));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Sum of all declared tensor sizes, in bytes (header excluded).
    pub fn payload_bytes(&self) -> usize {
        self.layers.iter().map(LayerRecord::tensor_len).sum::<usize>() * 4
    }
}

pub fn encode_blob(model: &ModelGraph) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + model.parameter_count() * 4);
    out.extend_from_slice(&BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    let mut put = |v: &[f32]| {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    for layer in &model.layers {
        match layer {
            Layer::Conv(c) => {
                put(&c.weights.data);
                if let Some(b) = &c.bias {
                    put(b);
                }
            }
            Layer::BatchNorm(b) => {
                put(&b.gamma);
                put(&b.beta);
                put(&b.running_mean);
                put(&b.running_var);
            }
            Layer::Linear(l) => {
                put(&l.weights);
                if let Some(b) = &l.bias {
                    put(b);
                }
            }
            _ => {}
        }
    }
    out
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BlobReader<'_> {
    fn take(&mut self, n: usize) -> Vec<f32> {
        let v = self.bytes[self.pos..self.pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        self.pos += 4 * n;
        v
    }
}

/// Rebuilds a graph from a parsed manifest and the raw blob bytes.
pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<ModelGraph, ModelError> {
    if blob.len() < HEADER_LEN {
        return Err(ModelError::SizeMismatch { expected: manifest.payload_bytes(), actual: 0 });
    }
    let magic: [u8; 4] = blob[..4].try_into().unwrap();
    if magic != BLOB_MAGIC {
        return Err(ModelError::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(blob[4..8].try_into().unwrap());
    if version != BLOB_VERSION {
        return Err(ModelError::BadVersion(version));
    }
    let expected = manifest.payload_bytes();
    let actual = blob.len() - HEADER_LEN;
    if expected != actual {
        return Err(ModelError::SizeMismatch { expected, actual });
    }

    let mut rd = BlobReader { bytes: &blob[HEADER_LEN..], pos: 0 };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, rec) in manifest.layers.iter().enumerate() {
        let layer = match *rec {
            LayerRecord::Conv2d { out_channels, in_channels, kernel, stride, padding, bias } => {
                let shape = [out_channels, in_channels, kernel[0], kernel[1]];
                let data = rd.take(shape.iter().product());
                let weights = Tensor4::new(shape, data)
                    .map_err(|_| ModelError::Shape { layer: i, reason: format!("conv shape {shape:?} has a zero dimension") })?;
                let bias = bias.then(|| rd.take(out_channels));
                Layer::Conv(ConvLayer { weights, bias, stride: (stride[0], stride[1]), padding: (padding[0], padding[1]) })
            }
            LayerRecord::Batchnorm { channels, eps } => Layer::BatchNorm(BatchNormLayer {
                gamma: rd.take(channels),
                beta: rd.take(channels),
                running_mean: rd.take(channels),
                running_var: rd.take(channels),
                eps,
            }),
            LayerRecord::Relu => Layer::Relu,
            LayerRecord::Maxpool { kernel, stride } => Layer::MaxPool { kernel, stride },
            LayerRecord::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerRecord::Linear { out, in_features, bias } => Layer::Linear(LinearLayer {
                weights: rd.take(out * in_features),
                bias: bias.then(|| rd.take(out)),
                out_features: out,
                in_features,
            }),
        };
        layers.push(layer);
    }
    let [c, h, w] = manifest.input;
    ModelGraph::new(manifest.name.clone(), Shape3::new(c, h, w), layers)
}

pub fn load_model(arch_path: impl AsRef<Path>, weights_path: impl AsRef<Path>) -> Result<ModelGraph, ModelError> {
    let manifest = Manifest::parse(&fs::read_to_string(arch_path)?)?;
    let blob = fs::read(weights_path)?;
    decode(&manifest, &blob)
}

pub fn save_model(
    model: &ModelGraph,
    arch_path: impl AsRef<Path>,
    weights_path: impl AsRef<Path>,
) -> Result<(), ModelError> {
    model.validate()?;
    fs::write(arch_path, Manifest::from_model(model).to_json())?;
    fs::write(weights_path, encode_blob(model))?;
    Ok(())
}
