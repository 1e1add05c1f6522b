//! Synthetic two-class stripe images standing in for a real dataset.
//!
//! Class 0 is a horizontal stripe pattern, class 1 the same pattern rotated
//! to vertical. Each image gets a random amplitude and a small phase jitter,
//! then i.i.d. Gaussian pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Batch, Dataset};
use crate::fixtures::SYNTH_INPUT;

pub const SYNTH_CLASSES: usize = 2;
pub const SYNTH_NOISE_STD: f64 = 0.3;
const PERIOD: f64 = 8.0;

fn generate(rng: &mut ChaCha8Rng, n: usize) -> Batch {
    let s = SYNTH_INPUT;
    let noise = Normal::new(0.0, SYNTH_NOISE_STD).unwrap();
    let mut inputs = Vec::with_capacity(n * s.len());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % SYNTH_CLASSES;
        let amp = rng.random_range(0.8..1.2);
        let phase = rng.random_range(-1.0..1.0);
        for y in 0..s.height {
            for x in 0..s.width {
                let t = if label == 0 { y } else { x } as f64;
                let v = amp * (std::f64::consts::TAU * (t + phase) / PERIOD).cos() + noise.sample(rng);
                inputs.push(v as f32);
            }
        }
        labels.push(label);
    }
    Batch { inputs, shape: s, labels }
}

/// Balanced, deterministic dataset. Train and test come from distinct
/// ChaCha streams of the same seed.
pub fn synth_dataset(seed: u64, n_train: usize, n_test: usize) -> Dataset {
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    train_rng.set_stream(0);
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed);
    test_rng.set_stream(1);
    Dataset { train: generate(&mut train_rng, n_train), test: generate(&mut test_rng, n_test), classes: SYNTH_CLASSES }
}
