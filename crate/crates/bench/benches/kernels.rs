use criterion::{criterion_group, criterion_main, Criterion};
use cryoflow::metrics::ssim3d;
use cryoflow::model::batch_loss_grad;
use cryoflow::sampler::{integrate, IntegrationSpec, Method};
use cryoflow::{Conditioning, Stage};
use cryoflow_bench::{desk_model, examples, phantom_case};

fn network(c: &mut Criterion) {
    let model = desk_model();
    let batch = examples(8, 16);
    let mut g = c.benchmark_group("network");
    g.sample_size(10);
    g.bench_function("forward 16^3", |b| b.iter(|| model.forward(&batch[0].input, 0.5).unwrap()));
    g.bench_function("loss+grad batch 8 x 16^3", |b| {
        b.iter(|| batch_loss_grad(model.network(), model.params(), &batch).unwrap())
    });
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let model = desk_model();
    let case = phantom_case(32);
    let start = case.frames[1].to_field();
    let spec = IntegrationSpec::new(Method::Heun, 5).unwrap();
    let mut g = c.benchmark_group("sampling");
    g.sample_size(10);
    g.bench_function("heun 5 steps 32^3", |b| {
        b.iter(|| integrate(&model, &start, Conditioning::new(7.0, Stage::First), &spec).unwrap())
    });
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let case = phantom_case(64);
    let (a, b) = (&case.frames[1].ct, &case.frames[3].ct);
    let mut g = c.benchmark_group("metrics");
    g.sample_size(10);
    g.bench_function("ssim 64^3", |bch| bch.iter(|| ssim3d(a, b).unwrap()));
    g.finish();
}

fn phantom(c: &mut Criterion) {
    let mut g = c.benchmark_group("phantom");
    g.sample_size(10);
    g.bench_function("case 64^3", |b| b.iter(|| phantom_case(64)));
    g.finish();
}

criterion_group!(benches, network, sampling, metrics, phantom);
criterion_main!(benches);
