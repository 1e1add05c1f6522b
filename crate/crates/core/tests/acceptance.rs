//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any criterion fails.
//!
//! Run with `cargo test -p nnwm-core --test acceptance`.

use std::time::{Duration, Instant};

use nnwm_core::attack::{attack_finetune, attack_noise, attack_zero_weights};
use nnwm_core::codec::{
    capacity, decode_rate, encode_rate, min_channels, rate_to_channel_count, EmbedParams, WatermarkPayload,
};
use nnwm_core::fixtures::{self, GraphBuilder};
use nnwm_core::model::{Layer, ModelGraph, Shape3};
use nnwm_core::pipeline::{eligible_layers, embed, extract, verify, Reference};
use nnwm_core::pruner::{apply_prune, LayerPlan, PruningPlan};
use nnwm_core::train::{
    accuracy, backward, finetune, forward, predict, synth_dataset, train_loss, trainable_params_mut, Dataset, Mode,
    TrainConfig,
};
use nnwm_core::Criterion;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_bits(rng: &mut impl Rng, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(0.5)).collect()
}

fn random_key(rng: &mut impl Rng) -> Vec<u8> {
    let len = rng.random_range(1..=32);
    (0..len).map(|_| rng.random()).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 }
}

fn bit_errors(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

// 1 ------------------------------------------------------------------------

fn capacity_cells() -> Outcome {
    let start = Instant::now();
    let cells = [(162, 1, 0.4, 65), (162, 2, 0.4, 130), (162, 3, 0.8, 390), (39, 3, 0.6, 69), (16, 3, 1.0, 48)];
    let wrong: Vec<String> = cells
        .iter()
        .filter(|&&(t, l, r, n)| capacity(t, l, r) != n)
        .map(|&(t, l, r, n)| format!("({t},{l},{r}) -> {} != {n}", capacity(t, l, r)))
        .collect();
    let elapsed = start.elapsed();
    outcome(
        wrong.is_empty() && elapsed < Duration::from_secs(1),
        format!("{} cells, {} wrong {wrong:?}, {elapsed:.2?} (< 1 s)", cells.len(), wrong.len()),
    )
}

// 2 ------------------------------------------------------------------------

fn reliability() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let trials = 200;
    let mut failures = Vec::new();
    let mut total_bits = 0usize;
    for trial in 0..trials {
        let l: u32 = rng.random_range(1..=3);
        let key = random_key(&mut rng);
        let params = EmbedParams::with_defaults(l, key.clone()).unwrap();
        let c_min = min_channels(&params);
        let n_conv = rng.random_range(8..=20);
        let model = fixtures::random_sequential(rng.random(), n_conv, c_min..=256);
        let mut criterion = if rng.random_bool(0.5) { Criterion::BnGamma } else { Criterion::L1Norm };
        let mut eligible = eligible_layers(&model, &params, criterion).eligible.len();
        if eligible == 0 {
            criterion = Criterion::L1Norm;
            eligible = eligible_layers(&model, &params, criterion).eligible.len();
        }
        let n = rng.random_range(1..=eligible * l as usize);
        let bits = random_bits(&mut rng, n);
        let result = (|| {
            let payload = WatermarkPayload::new(bits.clone(), l)?;
            let marked = embed(&model, &payload, &params, criterion)?;
            let via_model = extract(Reference::Model(&model), &marked.model, &params, n, criterion)?;
            let via_receipt = extract(Reference::Receipt(&marked.receipt), &marked.model, &params, n, criterion)?;
            let report = verify(&bits, &via_model.bits, 0.0)?;
            Ok::<_, Box<dyn std::error::Error>>((report.ber, via_receipt.bits))
        })();
        match result {
            Ok((ber, receipt_bits)) if ber == 0.0 && receipt_bits == bits => total_bits += n,
            Ok((ber, _)) => failures.push(format!("trial {trial}: ber {ber}")),
            Err(e) => failures.push(format!("trial {trial}: error {e}")),
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{trials} trials, {total_bits} bits, {} failures {:?}, {elapsed:.2?} (< 60 s)",
            failures.len(),
            &failures[..failures.len().min(3)]
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn qim_exhaustive() -> Outcome {
    let mut checked = 0usize;
    let mut failures = Vec::new();
    for l in 1..=4u32 {
        let params = EmbedParams::with_defaults(l, b"k".to_vec()).unwrap();
        for c in min_channels(&params)..=512 {
            for d in 0..(1u32 << l) {
                let k = rate_to_channel_count(encode_rate(d, &params).unwrap(), c);
                let got = decode_rate(k as f64 / c as f64, &params);
                checked += 1;
                if got.as_ref().ok() != Some(&d) {
                    failures.push(format!("l={l} c={c} d={d} -> {got:?}"));
                }
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("{checked} (l, c, d) cases, {} failures {:?}", failures.len(), &failures[..failures.len().min(3)]),
    )
}

// 4 ------------------------------------------------------------------------

fn robustness() -> Outcome {
    let mut results = Vec::new();
    let mut all_zero = true;
    let cases: [(&str, ModelGraph, Criterion); 2] = [
        ("vgg-tiny/l1", fixtures::vgg_tiny(40), Criterion::L1Norm),
        ("vgg19-conv16/bn", fixtures::vgg16_conv(41), Criterion::BnGamma),
    ];
    let data = synth_dataset(42, 128, 64);
    for (name, model, criterion) in cases {
        let params = EmbedParams::with_defaults(3, b"robustness-key".to_vec()).unwrap().with_r_cov(1.0).unwrap();
        let n = capacity(model.channel_counts().len(), 3, 1.0).min(3 * eligible_layers(&model, &params, criterion).eligible.len());
        let bits = random_bits(&mut ChaCha8Rng::seed_from_u64(43), n);
        let marked = embed(&model, &WatermarkPayload::new(bits.clone(), 3).unwrap(), &params, criterion).unwrap();
        let ft = TrainConfig { epochs: 5, batch_size: 32, lr: 0.01, seed: 44, ..TrainConfig::default() };
        let attacked: Vec<(&str, ModelGraph)> = vec![
            ("noise 0.1", attack_noise(&marked.model, 0.1, 45)),
            ("noise 1.0", attack_noise(&marked.model, 1.0, 46)),
            ("zero 30%", attack_zero_weights(&marked.model, 0.3)),
            ("zero 90%", attack_zero_weights(&marked.model, 0.9)),
            ("finetune 5 ep", attack_finetune(&marked.model, &data, &ft).unwrap()),
        ];
        for (attack, suspect) in attacked {
            let a = extract(Reference::Model(&model), &suspect, &params, n, criterion).unwrap();
            let b = extract(Reference::Receipt(&marked.receipt), &suspect, &params, n, criterion).unwrap();
            let errors = bit_errors(&a.bits, &bits) + bit_errors(&b.bits, &bits);
            all_zero &= errors == 0;
            results.push(format!("{name} {attack}: {errors}"));
        }
    }
    outcome(all_zero, format!("bit errors per attack [{}]", results.join(", ")))
}

// 5 ------------------------------------------------------------------------

fn pruning_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0005);
    let mut model = fixtures::vgg16_conv(5);
    let counts = model.channel_counts();
    let mut entries = Vec::new();
    for (conv, &c) in counts.iter().enumerate() {
        let k = rng.random_range(1..c / 2);
        let mut order: Vec<usize> = (0..c).collect();
        order.shuffle(&mut rng);
        let mut retained = order[k..].to_vec();
        retained.sort_unstable();
        let pos = model.conv_position(conv).unwrap();
        let Layer::BatchNorm(bn) = &mut model.layers[pos + 1] else { panic!("fixture has BN after every conv") };
        for &ch in &order[..k] {
            bn.gamma[ch] = 0.0;
            bn.beta[ch] = 0.0;
        }
        entries.push(LayerPlan { conv, target_rate: k as f64 / c as f64, k, retained });
    }
    let pruned = apply_prune(&model, &PruningPlan { criterion: Criterion::BnGamma, entries }).unwrap();
    let s = model.input;
    let inputs: Vec<f32> = (0..100 * s.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let a = predict(&model, &inputs, 100).unwrap();
    let b = predict(&pruned, &inputs, 100).unwrap();
    let max = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    outcome(
        max <= 1e-5,
        format!(
            "{} -> {} parameters, max |diff| {max:e} over 100 inputs (<= 1e-5)",
            model.parameter_count(),
            pruned.parameter_count()
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn gradient_check() -> Outcome {
    let shape = Shape3::new(2, 6, 6);
    let model: ModelGraph<f64> = GraphBuilder::new(shape, ChaCha8Rng::seed_from_u64(6))
        .conv(4, 3, true)
        .bn_random()
        .relu()
        .maxpool(2, 2)
        .conv(5, 3, false)
        .bn_random()
        .relu()
        .gap()
        .linear(3)
        .build("gradcheck")
        .cast();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 6;
    let x: Vec<f64> = (0..n * shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let mut m = model.clone();
    let (_, cache) = forward(&mut m, &x, n, Mode::Train).unwrap();
    let grads = backward(&m, &cache, &y).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(<[f64]>::to_vec).collect();

    // Tensor order: conv0 w, conv0 b, bn0 gamma, bn0 beta, conv1 w, bn1 gamma, bn1 beta, linear w, linear b.
    let kinds = ["conv", "conv", "bn", "bn", "conv", "bn", "bn", "linear", "linear"];
    let mut probe = model.clone();
    assert_eq!(trainable_params_mut(&mut probe).len(), kinds.len());
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = [0usize; 3];
    for (t, kind) in kinds.iter().enumerate() {
        for _ in 0..8 {
            let i = rng.random_range(0..analytic[t].len());
            let orig = trainable_params_mut(&mut probe)[t][i];
            trainable_params_mut(&mut probe)[t][i] = orig + h;
            let lp = train_loss(&probe, &x, &y).unwrap();
            trainable_params_mut(&mut probe)[t][i] = orig - h;
            let lm = train_loss(&probe, &x, &y).unwrap();
            trainable_params_mut(&mut probe)[t][i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[t][i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            checked[["conv", "bn", "linear"].iter().position(|k| k == kind).unwrap()] += 1;
        }
    }
    let total: usize = checked.iter().sum();
    outcome(
        worst < 1e-4 && total >= 50 && checked.iter().all(|&c| c > 0),
        format!("{total} params (conv {}, bn {}, linear {}), worst rel err {worst:.2e} (< 1e-4)", checked[0], checked[1], checked[2]),
    )
}

// 7 + 9 --------------------------------------------------------------------

const SEEDS: u64 = 5;
const BASELINE: TrainConfig =
    TrainConfig { epochs: 5, batch_size: 32, lr: 0.05, weight_decay: 1e-4, seed: 0, precision: nnwm_core::train::Precision::F32 };
const RECOVERY: TrainConfig =
    TrainConfig { epochs: 3, batch_size: 32, lr: 0.02, weight_decay: 1e-4, seed: 0, precision: nnwm_core::train::Precision::F32 };

struct SeedRun {
    baseline: f64,
    /// (criterion, r_cov, accuracy after embedding and fine-tuning)
    marked: Vec<(Criterion, f64, f64)>,
}

fn embed_and_recover(base: &ModelGraph, data: &Dataset, seed: u64, criterion: Criterion, r_cov: f64) -> f64 {
    let key = format!("fidelity-{seed}").into_bytes();
    let params = EmbedParams::with_defaults(3, key).unwrap().with_r_cov(r_cov).unwrap();
    let n = capacity(base.channel_counts().len(), 3, r_cov);
    let bits = random_bits(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xb175), n);
    let marked = embed(base, &WatermarkPayload::new(bits.clone(), 3).unwrap(), &params, criterion).unwrap();
    let (tuned, _) = finetune(&marked.model, data, &TrainConfig { seed: seed + 100, ..RECOVERY }).unwrap();
    let read = extract(Reference::Model(base), &tuned, &params, n, criterion).unwrap();
    assert_eq!(read.bits, bits, "watermark lost during recovery fine-tuning");
    accuracy(&tuned, &data.test).unwrap()
}

fn fidelity_runs() -> (Vec<SeedRun>, Duration) {
    let start = Instant::now();
    let runs = (0..SEEDS)
        .map(|seed| {
            let data = synth_dataset(seed, 256, 200);
            let (base, _) = finetune(&fixtures::vgg_tiny(seed), &data, &TrainConfig { seed, ..BASELINE }).unwrap();
            let baseline = accuracy(&base, &data.test).unwrap();
            let mut marked = Vec::new();
            for criterion in [Criterion::BnGamma, Criterion::L1Norm] {
                for r_cov in [1.0, 0.25] {
                    marked.push((criterion, r_cov, embed_and_recover(&base, &data, seed, criterion, r_cov)));
                }
            }
            SeedRun { baseline, marked }
        })
        .collect();
    (runs, start.elapsed())
}

fn median_acc(runs: &[SeedRun], criterion: Criterion, r_cov: f64) -> f64 {
    median(
        runs.iter()
            .map(|r| r.marked.iter().find(|m| m.0 == criterion && m.1 == r_cov).unwrap().2)
            .collect(),
    )
}

fn toy_fidelity(runs: &[SeedRun], elapsed: Duration) -> Outcome {
    let base = median(runs.iter().map(|r| r.baseline).collect());
    let bn = median_acc(runs, Criterion::BnGamma, 1.0);
    let l1 = median_acc(runs, Criterion::L1Norm, 1.0);
    let pass = base >= 0.90 && bn >= base - 0.05 && l1 >= base - 0.05 && elapsed < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "median over {SEEDS} seeds: baseline {:.1}% (>= 90%), marked r_cov=1 l=3: bn_gamma {:.1}%, l1_norm {:.1}% (>= baseline - 5), {elapsed:.1?} (< 10 min)",
            base * 100.0,
            bn * 100.0,
            l1 * 100.0
        ),
    )
}

fn monotone_trend(runs: &[SeedRun]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for criterion in [Criterion::BnGamma, Criterion::L1Norm] {
        let low = median_acc(runs, criterion, 0.25);
        let high = median_acc(runs, criterion, 1.0);
        pass &= low >= high - 0.02;
        parts.push(format!("{criterion}: r_cov=0.25 {:.1}% vs r_cov=1.0 {:.1}%", low * 100.0, high * 100.0));
    }
    outcome(pass, format!("median over {SEEDS} seeds, {} (low >= high - 2)", parts.join("; ")))
}

// 8 ------------------------------------------------------------------------

fn wrong_key() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0008);
    let model = fixtures::vgg16_conv(8);
    let t = model.channel_counts().len();
    let (l, r_cov) = (3, 0.25);
    let n = capacity(t, l, r_cov);
    let mut bers = Vec::new();
    for _ in 0..50 {
        let key = random_key(&mut rng);
        let params = EmbedParams::with_defaults(l, key.clone()).unwrap().with_r_cov(r_cov).unwrap();
        let bits = random_bits(&mut rng, n as usize);
        let marked = embed(&model, &WatermarkPayload::new(bits.clone(), l).unwrap(), &params, Criterion::L1Norm).unwrap();
        for _ in 0..20 {
            let mut wrong = random_key(&mut rng);
            while wrong == key {
                wrong = random_key(&mut rng);
            }
            let wp = EmbedParams { key: wrong, ..params.clone() };
            let read = extract(Reference::Model(&model), &marked.model, &wp, n, Criterion::L1Norm).unwrap();
            bers.push(bit_errors(&read.bits, &bits) as f64 / n as f64);
        }
    }
    let mean = bers.iter().sum::<f64>() / bers.len() as f64;
    outcome(
        (0.4..=0.6).contains(&mean),
        format!("{} trials, {n} bits in {t} convs (r_cov {r_cov}), mean BER {mean:.4} (in [0.4, 0.6])", bers.len()),
    )
}

fn main() {
    // libtest-style filtering flags are accepted and ignored.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut all = true;
    let mut report = |id: &str, name: &str, o: Outcome| {
        all &= o.pass;
        println!("{} criterion {id} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    report("1", "capacity", capacity_cells());
    report("2", "reliability", reliability());
    report("3", "qim-exhaustive", qim_exhaustive());
    report("4", "structural-robustness", robustness());
    report("5", "pruning-equivalence", pruning_equivalence());
    report("6", "gradient-check", gradient_check());
    let (runs, elapsed) = fidelity_runs();
    report("7", "toy-fidelity", toy_fidelity(&runs, elapsed));
    report("8", "wrong-key", wrong_key());
    report("9", "fidelity-trend", monotone_trend(&runs));
    if !all {
        std::process::exit(1);
    }
}
