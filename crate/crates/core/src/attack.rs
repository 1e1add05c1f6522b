//! Watermark-removal attacks used to measure robustness.
//!
//! Parameter-space attacks (noise, magnitude zeroing, fine-tuning) keep every
//! channel count and therefore cannot change what extraction reads. The
//! structural attack re-prunes without the key and is used to measure how
//! far the bit error rate degrades.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::importance::Criterion;
use crate::model::{Layer, ModelGraph};
use crate::pruner::{apply_prune, has_consumer, LayerPlan, PruneError, PruningPlan};
use crate::train::{finetune, Dataset, TrainConfig, TrainError};

fn std_of(v: &[f32]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    (v.iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Adds zero-mean Gaussian noise to every trainable tensor, with standard
/// deviation `sigma_rel` times that tensor's own standard deviation.
pub fn attack_noise(model: &ModelGraph, sigma_rel: f64, seed: u64) -> ModelGraph {
    let mut out = model.clone();
    if sigma_rel <= 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perturb = |v: &mut Vec<f32>| {
        let std = std_of(v) * sigma_rel;
        if std > 0.0 && std.is_finite() {
            let dist = Normal::new(0.0, std).unwrap();
            v.iter_mut().for_each(|x| *x += dist.sample(&mut rng) as f32);
        }
    };
    for layer in &mut out.layers {
        match layer {
            Layer::Conv(c) => {
                perturb(&mut c.weights.data);
                if let Some(b) = &mut c.bias {
                    perturb(b);
                }
            }
            Layer::BatchNorm(b) => {
                perturb(&mut b.gamma);
                perturb(&mut b.beta);
            }
            Layer::Linear(l) => {
                perturb(&mut l.weights);
                if let Some(b) = &mut l.bias {
                    perturb(b);
                }
            }
            _ => {}
        }
    }
    out
}

/// Zeroes the globally smallest-magnitude `fraction` of conv and linear weights.
pub fn attack_zero_weights(model: &ModelGraph, fraction: f64) -> ModelGraph {
    let mut out = model.clone();
    let mut tensors: Vec<&mut Vec<f32>> = out
        .layers
        .iter_mut()
        .filter_map(|l| match l {
            Layer::Conv(c) => Some(&mut c.weights.data),
            Layer::Linear(l) => Some(&mut l.weights),
            _ => None,
        })
        .collect();
    let mut all: Vec<(f32, usize, usize)> = tensors
        .iter()
        .enumerate()
        .flat_map(|(t, v)| v.iter().enumerate().map(move |(i, &x)| (x.abs(), t, i)))
        .collect();
    let count = ((all.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    if count == 0 {
        return out;
    }
    let count = count.min(all.len());
    all.select_nth_unstable_by(count - 1, |a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    for &(_, t, i) in &all[..count] {
        tensors[t][i] = 0.0;
    }
    out
}

/// Fine-tunes the suspect with the toy trainer.
pub fn attack_finetune(model: &ModelGraph, data: &Dataset, config: &TrainConfig) -> Result<ModelGraph, TrainError> {
    Ok(finetune(model, data, config)?.0)
}

/// Removes `round(extra_rate * c)` uniformly random channels from every conv
/// layer that has a consumer.
pub fn attack_structural(model: &ModelGraph, extra_rate: f64, seed: u64) -> Result<ModelGraph, PruneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (conv, &c) in model.channel_counts().iter().enumerate() {
        if !has_consumer(model, conv) {
            continue;
        }
        let k = ((extra_rate * c as f64).round() as usize).min(c - 1);
        if k == 0 {
            continue;
        }
        let mut channels: Vec<usize> = (0..c).collect();
        channels.shuffle(&mut rng);
        let mut retained = channels[k..].to_vec();
        retained.sort_unstable();
        entries.push(LayerPlan { conv, target_rate: extra_rate, k, retained });
    }
    apply_prune(model, &PruningPlan { criterion: Criterion::L1Norm, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn zero_sigma_and_fraction_are_identity() {
        let m = fixtures::vgg_tiny(1);
        assert_eq!(attack_noise(&m, 0.0, 3), m);
        assert_eq!(attack_zero_weights(&m, 0.0), m);
        assert_eq!(attack_structural(&m, 0.0, 3).unwrap(), m);
    }

    #[test]
    fn noise_keeps_shapes_changes_values() {
        let m = fixtures::vgg_tiny(1);
        let a = attack_noise(&m, 0.1, 3);
        assert_eq!(a.channel_counts(), m.channel_counts());
        assert_ne!(a, m);
        a.validate().unwrap();
        assert_eq!(attack_noise(&m, 0.1, 3), a);
    }

    #[test]
    fn zeroing_fraction() {
        let m = fixtures::vgg_tiny(2);
        let a = attack_zero_weights(&m, 0.3);
        let count = |g: &ModelGraph| -> (usize, usize) {
            g.layers
                .iter()
                .filter_map(|l| match l {
                    Layer::Conv(c) => Some(&c.weights.data),
                    Layer::Linear(l) => Some(&l.weights),
                    _ => None,
                })
                .flatten()
                .fold((0, 0), |(z, n), &x| (z + usize::from(x == 0.0), n + 1))
        };
        let (zeros, total) = count(&a);
        assert_eq!(zeros, (total as f64 * 0.3).round() as usize);
        let (zeros, total) = count(&attack_zero_weights(&m, 1.0));
        assert_eq!(zeros, total);
    }

    #[test]
    fn structural_attack_shrinks_layers() {
        let m = fixtures::vgg_tiny(2);
        let a = attack_structural(&m, 0.1, 9).unwrap();
        assert_eq!(a.channel_counts(), vec![29, 29, 58, 58, 58]);
    }
}
