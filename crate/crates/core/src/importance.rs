//! Per-output-channel importance scores for a conv layer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Magnitude of the scale factor of the batch norm right after the conv.
    BnGamma,
    /// Sum of absolute filter weights (bias excluded).
    L1Norm,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::BnGamma => "bn_gamma",
            Criterion::L1Norm => "l1_norm",
        })
    }
}

impl FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bn" | "bn_gamma" => Ok(Criterion::BnGamma),
            "l1" | "l1_norm" => Ok(Criterion::L1Norm),
            other => Err(format!("unknown criterion {other:?} (expected bn or l1)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error("criterion {criterion} is not applicable to conv {conv}: {reason}")]
    Inapplicable { conv: usize, criterion: Criterion, reason: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    pub scores: Vec<f64>,
    pub criterion: Criterion,
}

impl ImportanceVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// `|gamma_i|` of the batch norm immediately following conv `conv`.
pub fn score_bn_gamma(model: &ModelGraph, conv: usize) -> Result<ImportanceVector, ImportanceError> {
    let c_out = model.conv(conv)?.c_out();
    let bn = model.bn_after(conv)?.ok_or(ImportanceError::Inapplicable {
        conv,
        criterion: Criterion::BnGamma,
        reason: "no batch norm directly after the conv",
    })?;
    if bn.channels() != c_out {
        return Err(ImportanceError::Inapplicable {
            conv,
            criterion: Criterion::BnGamma,
            reason: "batch norm length differs from conv output channels",
        });
    }
    Ok(ImportanceVector { scores: bn.gamma.iter().map(|g| f64::from(g.abs())).collect(), criterion: Criterion::BnGamma })
}

/// L1 norm of each output filter of conv `conv`.
pub fn score_l1(model: &ModelGraph, conv: usize) -> Result<ImportanceVector, ImportanceError> {
    let w = &model.conv(conv)?.weights;
    let scores = (0..w.c_out()).map(|k| w.filter(k).iter().map(|x| f64::from(x.abs())).sum()).collect();
    Ok(ImportanceVector { scores, criterion: Criterion::L1Norm })
}

pub fn score(model: &ModelGraph, conv: usize, criterion: Criterion) -> Result<ImportanceVector, ImportanceError> {
    match criterion {
        Criterion::BnGamma => score_bn_gamma(model, conv),
        Criterion::L1Norm => score_l1(model, conv),
    }
}

/// Whether `criterion` can score conv `conv` of `model`.
pub fn applicable(model: &ModelGraph, conv: usize, criterion: Criterion) -> bool {
    match criterion {
        Criterion::L1Norm => model.conv(conv).is_ok(),
        Criterion::BnGamma => score_bn_gamma(model, conv).is_ok(),
    }
}
