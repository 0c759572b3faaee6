//! Hot-path benchmarks: the autodiff matmul kernel, whole-encoder forwards,
//! one full optimizer step, the frozen backbone, and dataset generation.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fineformer_core::{
    clip_gradients, generate, spatial_avg_pool, BackboneStub, CrossEncoderModel, Graph,
    MeanPoolBaseline, Model, ModelConfig, OptimizerState, ParamStore, SyntheticSpec, Tensor,
    TrainConfig, VisionEncoderModel,
};

fn lcg_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 33) as f64 / (1u64 << 31) as f64 - 0.5
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("graph_matmul");
    for n in [32usize, 64, 128] {
        let a = lcg_tensor(vec![n, n], 1);
        let b_in = lcg_tensor(vec![n, n], 2);
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let x = g.leaf(a.clone(), true);
                let y = g.leaf(b_in.clone(), true);
                let z = g.matmul(x, y).unwrap();
                let s = g.sum_all(z);
                g.backward(s).unwrap();
                black_box(g.value(s).item())
            })
        });
    }
    group.finish();
}

fn bench_backbone(c: &mut Criterion) {
    let cfg = ModelConfig::desk_default();
    let stub = BackboneStub::new(&cfg, 42);
    let video = lcg_tensor(vec![23, 8, 8, 3], 3);
    let stride = video.shape()[0] / cfg.t_prime;
    c.bench_function("backbone_features_23x8x8", |b| {
        b.iter(|| {
            let vol = stub.forward_strided(&video, 0, stride).unwrap();
            black_box(spatial_avg_pool(&vol))
        })
    });
}

fn bench_encoder_forward(c: &mut Criterion) {
    let cfg = ModelConfig::desk_default();
    let feats = lcg_tensor(vec![cfg.c_prime, cfg.t_prime], 4);
    let mut group = c.benchmark_group("encoder_forward");

    let mut store = ParamStore::new();
    let baseline = MeanPoolBaseline::init(&mut store, &cfg, 11).unwrap();
    group.bench_function("baseline", |b| {
        b.iter(|| black_box(baseline.logits_for(&store, &feats).unwrap()))
    });

    for layers in [1usize, 3] {
        let cfg = ModelConfig { vision_layers: layers, ..cfg.clone() };
        let mut store = ParamStore::new();
        let vision = VisionEncoderModel::init(&mut store, &cfg, 11).unwrap();
        group.bench_with_input(BenchmarkId::new("vision", layers), &layers, |b, _| {
            b.iter(|| black_box(vision.logits_for(&store, &feats).unwrap()))
        });
    }

    let mut store = ParamStore::new();
    let cross = CrossEncoderModel::init(&mut store, &cfg, 11).unwrap();
    group.bench_function("cross", |b| {
        b.iter(|| black_box(cross.logits_for(&store, &feats).unwrap()))
    });
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let ds = generate(&SyntheticSpec::desk_default()).unwrap();
    let cfg = ModelConfig::desk_default();
    let tcfg = TrainConfig::desk_sgd();
    let mut store = ParamStore::new();
    let model = VisionEncoderModel::init(&mut store, &cfg, 11).unwrap();
    let mut opt = OptimizerState::new(tcfg.optimizer, &store);
    let batch: Vec<_> = ds.train.iter().take(tcfg.batch_size).collect();

    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    group.bench_function("vision_batch32", |b| {
        b.iter(|| {
            store.zero_grads();
            let mut g = Graph::new();
            let mut loss = None;
            for ex in &batch {
                let feats = g.constant(ex.features(None).unwrap());
                let logits = model.forward(&mut g, &store, feats).unwrap();
                let ce = g.cross_entropy(logits, ex.label).unwrap();
                loss = Some(match loss {
                    Some(prev) => g.add(prev, ce).unwrap(),
                    None => ce,
                });
            }
            let mean = g.mul_scalar(loss.unwrap(), 1.0 / batch.len() as f64);
            g.backward(mean).unwrap();
            g.write_grads(&mut store);
            clip_gradients(&mut store, tcfg.clip_max_norm.unwrap()).unwrap();
            opt.apply(&mut store, &tcfg, tcfg.lr).unwrap();
            black_box(g.value(mean).item())
        })
    });
    group.finish();
}

fn bench_dataset(c: &mut Criterion) {
    let mut group = c.benchmark_group("dataset");
    group.sample_size(10);
    group.bench_function("generate_default", |b| {
        b.iter(|| black_box(generate(&SyntheticSpec::desk_default()).unwrap()))
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_matmul,
    bench_backbone,
    bench_encoder_forward,
    bench_train_step,
    bench_dataset
);
criterion_main!(benches);
