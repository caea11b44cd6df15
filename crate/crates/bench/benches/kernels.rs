use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dtm_bench::{ci_member, clustered_features, scored_labels, volume};
use dtm_core::embed::{calibrate_affinities, tsne, TsneConfig};
use dtm_core::eval::{auc, select_threshold};
use dtm_core::nn;
use dtm_core::xai::{gradcam, occlusion, OcclusionConfig};
use dtm_core::{Label, Tensor};
use std::hint::black_box;

fn network(c: &mut Criterion) {
    let mut g = c.benchmark_group("network");
    for extents in [[16, 16, 4], [32, 32, 8]] {
        let member = ci_member(extents, 3);
        let net = member.network().unwrap();
        let x = net.input_for(&volume(extents)).unwrap();
        let id = format!("{}x{}x{}", extents[0], extents[1], extents[2]);
        g.bench_with_input(BenchmarkId::new("forward", &id), &x, |b, x| {
            b.iter(|| nn::forward(&net.spec, &net.params, black_box(x)).unwrap())
        });
        let (_, tape) = nn::forward(&net.spec, &net.params, &x).unwrap();
        g.bench_with_input(BenchmarkId::new("backward", &id), &tape, |b, tape| {
            b.iter(|| nn::backward_scalar(&net.spec, &net.params, black_box(tape), 1.0).unwrap())
        });
    }
    g.finish();
}

fn explanations(c: &mut Criterion) {
    let extents = [32, 32, 8];
    let member = ci_member(extents, 5);
    let v = volume(extents);
    let mut g = c.benchmark_group("explain");
    g.sample_size(10);
    g.bench_function("gradcam_32x32x8", |b| {
        b.iter(|| gradcam(&member, black_box(&v), None, Label::Unfavorable).unwrap())
    });
    let cfg = OcclusionConfig {
        window: [8, 8, 2],
        stride: [8, 8, 2],
        fill: 0.0,
    };
    g.bench_function("occlusion_32x32x8_w8", |b| {
        b.iter(|| occlusion(&member, black_box(&v), None, &cfg, Label::Unfavorable).unwrap())
    });
    g.finish();
}

fn embedding(c: &mut Criterion) {
    let mut g = c.benchmark_group("tsne");
    g.sample_size(10);
    for n in [60, 150] {
        let features = clustered_features(n, 10, 3);
        let aff = calibrate_affinities(&features, 10.0).unwrap();
        let cfg = TsneConfig {
            iterations: 300,
            ..TsneConfig::default()
        };
        g.bench_with_input(BenchmarkId::new("affinities", n), &features, |b, f| {
            b.iter(|| calibrate_affinities(black_box(f), 10.0).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("optimize_300", n), &aff, |b, aff| {
            b.iter(|| tsne(black_box(aff), &cfg).unwrap())
        });
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let mut g = c.benchmark_group("metrics");
    for n in [400, 4000] {
        let (scores, labels) = scored_labels(n);
        g.bench_with_input(BenchmarkId::new("auc", n), &n, |b, _| {
            b.iter(|| auc(black_box(&scores), &labels).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("threshold", n), &n, |b, _| {
            b.iter(|| select_threshold(black_box(&scores), &labels).unwrap())
        });
    }
    g.finish();
}

fn tensor_ops(c: &mut Criterion) {
    let t = volume([64, 64, 16]);
    c.bench_function("tensor_max_64x64x16", |b| b.iter(|| black_box(&t).max()));
    let small = Tensor::filled(&[8, 8, 2], 1.0);
    c.bench_function("upsample_8x8x2_to_64x64x16", |b| {
        b.iter(|| dtm_core::resample::trilinear_upsample(black_box(&small), [64, 64, 16]).unwrap())
    });
}

criterion_group!(benches, network, explanations, embedding, metrics, tensor_ops);
criterion_main!(benches);
