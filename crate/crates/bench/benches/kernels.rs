use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use revi_core::adapter::AdapterConfig;
use revi_core::backbone::{BackboneConfig, Model};
use revi_core::rng::stream;
use revi_core::rpca::{planted_instance, rpca_decompose, svd, RpcaConfig};
use revi_core::{Tape, Tensor};

fn matmul(c: &mut Criterion) {
    let mut rng = stream(1, "bench", 0);
    let a = Tensor::normal(&[256, 64], 1.0, &mut rng);
    let b = Tensor::normal(&[64, 256], 1.0, &mut rng);
    c.bench_function("matmul_256x64x256", |bench| {
        bench.iter(|| black_box(a.matmul(&b).unwrap()))
    });
}

fn conv(c: &mut Criterion) {
    let mut rng = stream(2, "bench", 0);
    let x = Tensor::normal(&[16, 32, 32], 1.0, &mut rng);
    let w = Tensor::normal(&[16, 16, 3, 3], 0.1, &mut rng);
    c.bench_function("conv3x3_16ch_32px_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.var(x.clone());
            let wv = tape.var(w.clone());
            let y = tape.conv2d(xv, wv, None).unwrap();
            let l = tape.sum(y);
            tape.backward(l).unwrap();
            black_box(tape.grad(wv).map(|g| g[0]))
        })
    });
}

fn decomposition(c: &mut Criterion) {
    let mut rng = stream(3, "bench", 0);
    let inst = planted_instance(64, 64, 2, 0.05, 10.0, &mut rng).unwrap();
    c.bench_function("svd_64x64", |bench| {
        bench.iter(|| black_box(svd(&inst.observed).unwrap()))
    });
    let mut group = c.benchmark_group("rpca");
    group.sample_size(10);
    group.bench_function("ialm_64x64_rank2", |bench| {
        bench.iter(|| black_box(rpca_decompose(&inst.observed, &RpcaConfig::default()).unwrap()))
    });
    group.finish();
}

fn forward(c: &mut Criterion) {
    let mut model = Model::new(BackboneConfig::default(), &mut stream(4, "bench", 0)).unwrap();
    model
        .attach_adapters(&AdapterConfig::default(), &mut stream(4, "bench", 1))
        .unwrap();
    let img = Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut stream(4, "bench", 2));
    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    group.bench_function("predict_64px_encoder_adapters", |bench| {
        bench.iter(|| black_box(model.predict(&img).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, matmul, conv, decomposition, forward);
criterion_main!(benches);
