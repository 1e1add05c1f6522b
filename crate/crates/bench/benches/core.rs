use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion as Bench};
use nnwm_core::codec::{decode_rate, encode_rate, rate_to_channel_count, select_layers, EmbedParams, WatermarkPayload};
use nnwm_core::fixtures;
use nnwm_core::pipeline::{embed, extract, Reference};
use nnwm_core::train::{finetune, predict, synth_dataset, TrainConfig};
use nnwm_core::Criterion;

fn codec(c: &mut Bench) {
    let params = EmbedParams::with_defaults(3, b"bench".to_vec()).unwrap();
    c.bench_function("codec/round_trip_c256_all_d", |b| {
        b.iter(|| {
            for d in 0..8 {
                let k = rate_to_channel_count(encode_rate(d, &params).unwrap(), 256);
                black_box(decode_rate(k as f64 / 256.0, &params).unwrap());
            }
        })
    });
    let eligible: Vec<usize> = (0..162).collect();
    c.bench_function("codec/select_layers_162_of_130", |b| {
        b.iter(|| select_layers(black_box(&eligible), 130, b"bench-key").unwrap())
    });
}

fn pipeline(c: &mut Bench) {
    let model = fixtures::vgg16_conv(0);
    let params = EmbedParams::with_defaults(3, b"bench".to_vec()).unwrap();
    let payload = WatermarkPayload::new((0..48).map(|i| i % 3 == 0).collect(), 3).unwrap();
    c.bench_function("pipeline/embed_vgg19_conv16_48_bits", |b| {
        b.iter(|| embed(&model, &payload, &params, Criterion::L1Norm).unwrap())
    });
    let marked = embed(&model, &payload, &params, Criterion::BnGamma).unwrap();
    c.bench_function("pipeline/extract_receipt", |b| {
        b.iter(|| extract(Reference::Receipt(&marked.receipt), &marked.model, &params, 48, Criterion::BnGamma).unwrap())
    });
}

fn trainer(c: &mut Bench) {
    let model = fixtures::vgg_tiny(0);
    let data = synth_dataset(0, 32, 32);
    c.bench_function("train/predict_vgg_tiny_batch32", |b| b.iter(|| predict(&model, &data.test.inputs, 32).unwrap()));
    let cfg = TrainConfig { epochs: 1, batch_size: 32, lr: 0.01, ..TrainConfig::default() };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("sgd_epoch_vgg_tiny_32_samples", |b| {
        b.iter_batched(|| model.clone(), |m| finetune(&m, &data, &cfg).unwrap(), BatchSize::SmallInput)
    });
    group.finish();
}

criterion_group!(benches, codec, pipeline, trainer);
criterion_main!(benches);
