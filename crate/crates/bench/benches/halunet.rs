use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use halunet::metrics::evaluate_supervised;
use halunet::model::{EncoderPreset, Feature, FusionKind};
use halunet::nn::bce_grad;
use halunet::trainer::adamw_step;
use halunet::{HaluNet, ModelConfig, TrainConfig};
use halunet_bench::{fixture, scored, D_EMB};

fn inference(c: &mut Criterion) {
    let ds = fixture(100, 1);
    let mut group = c.benchmark_group("forward");
    group.throughput(Throughput::Elements(ds.len() as u64));
    for (name, preset, fusion) in [
        ("all_cnn_concat", EncoderPreset::AllCnn, FusionKind::ConcatMlp),
        ("all_cnn_attention", EncoderPreset::AllCnn, FusionKind::Attention),
        ("all_mlp_concat", EncoderPreset::AllMlp, FusionKind::ConcatMlp),
    ] {
        let net = HaluNet::new(ModelConfig::with_preset(&Feature::ALL, preset, fusion, D_EMB), 0).unwrap();
        group.bench_function(name, |b| b.iter(|| net.score_all(black_box(&ds.records)).unwrap()));
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let ds = fixture(32, 2);
    let net = HaluNet::new(ModelConfig::new(D_EMB), 0).unwrap();
    let tcfg = TrainConfig::default();
    let mut group = c.benchmark_group("train_step");
    group.throughput(Throughput::Elements(ds.len() as u64));
    group.bench_function("batch_32", |b| {
        b.iter_batched(
            || net.params.clone(),
            |mut params| {
                params.zero_grad();
                for r in &ds.records {
                    let (pred, tape) = net.network().forward_tape(&params, r).unwrap();
                    let g = bce_grad(pred.logit, r.label) / ds.len() as f32;
                    net.network().backward(&tape, &mut params, g);
                }
                adamw_step(&mut params, &tcfg, 1).unwrap();
                params
            },
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut group = c.benchmark_group("evaluate");
    for n in [1_000, 10_000] {
        let (scores, labels) = scored(n);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_function(format!("n_{n}"), |b| {
            b.iter(|| evaluate_supervised("bench", black_box(&scores), black_box(&labels)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, inference, train_step, metrics);
criterion_main!(benches);
