//! Structural watermarking for convolutional networks.
//!
//! A watermark is split into `l`-bit segments; each segment selects a
//! quantized pruning rate that is applied, by channel pruning, to a
//! key-selected conv layer. Extraction compares channel counts of a suspect
//! model against the original (or a receipt of its counts) and reads the
//! segments back from the observed rates. Because the mark lives in the
//! architecture, parameter-only modifications such as noise, magnitude
//! pruning or fine-tuning leave it untouched.
//!
//! Modules:
//! - [`model`], [`store`]: sequential graph and its on-disk container
//! - [`importance`]: BN-scale and filter L1 channel scores
//! - [`codec`], [`keystream`]: segment/rate arithmetic and keyed layer choice
//! - [`pruner`]: channel removal with rewiring, receipts
//! - [`pipeline`], [`attack`]: embed / extract / verify and robustness attacks
//! - [`train`]: small SGD trainer for fidelity experiments

pub mod attack;
pub mod codec;
pub mod fixtures;
pub mod importance;
pub mod keystream;
pub mod model;
pub mod pipeline;
pub mod pruner;
pub mod store;
pub mod train;

pub use codec::{capacity, EmbedParams, WatermarkPayload};
pub use importance::{Criterion, ImportanceVector};
pub use model::{Layer, ModelError, ModelGraph, Shape3};
pub use pipeline::{embed, embed_with, extract, verify, EmbedOptions, Reference, Verdict, VerifyReport, WatermarkError};
pub use pruner::{apply_prune, observed_rates, PruningPlan, Receipt};
pub use store::{load_model, save_model};
