use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use dvsci::amplifier::{build_bundle, AmplifierConfig};
use dvsci::flow::{estimate, FlowEstimatorSpec};
use dvsci::solvers::gap_tv;
use dvsci::train::{evaluate_loss, synth_corpus, Sample};
use dvsci::{GapTvConfig, MaskSet, ModelConfig, OfaNet, PipelineMode};

const N: usize = 64;
const B: usize = 4;

fn fixtures() -> (MaskSet, dvsci::TrainPair) {
    let masks = MaskSet::generate(N, N, B, 0.5, (2, 2), 1).unwrap();
    let pair = synth_corpus(N, N, B, 1, 2).unwrap().remove(0);
    (masks, pair)
}

fn solvers(c: &mut Criterion) {
    let (masks, pair) = fixtures();
    let y = pair.measure(&masks, PipelineMode::Dual, 0.0, 0).unwrap();
    let cfg = GapTvConfig {
        iterations: 10,
        ..GapTvConfig::default()
    };
    c.bench_function("gaptv_64x64_b4_10it", |b| b.iter(|| gap_tv(black_box(&y), &masks, &cfg).unwrap()));
    c.bench_function("amplifier_64x64", |b| {
        b.iter(|| build_bundle(black_box(&y), &masks, &AmplifierConfig::default()).unwrap())
    });
}

fn flow(c: &mut Criterion) {
    let (_, pair) = fixtures();
    let mut frames = pair.x1.data().outer_iter();
    let (a, b2) = (frames.next().unwrap(), frames.next().unwrap());
    let spec = FlowEstimatorSpec::classical();
    c.bench_function("horn_schunck_64x64", |b| b.iter(|| estimate(&spec, black_box(a), b2).unwrap()));
}

fn network(c: &mut Criterion) {
    let (masks, pair) = fixtures();
    let net = OfaNet::new(ModelConfig::dual(B, 0.25), 5).unwrap();
    let y = pair.measure(&masks, PipelineMode::Dual, 0.0, 0).unwrap();
    let sample = Sample::new(&net, &pair, &masks, 0.0, 0).unwrap();
    let mut g = c.benchmark_group("ofanet_64x64_b4_quarter");
    g.sample_size(10);
    g.bench_function("inference", |b| b.iter(|| net.reconstruct(black_box(&y), &masks).unwrap()));
    g.bench_function("loss_and_gradient", |b| {
        b.iter(|| evaluate_loss(&net, &net.store, black_box(&sample), 1.0, None, true).unwrap())
    });
    g.finish();
}

criterion_group!(benches, solvers, flow, network);
criterion_main!(benches);
