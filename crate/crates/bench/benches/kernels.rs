use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nwp_bench::{dense, model_and_corpus};
use nwp_core::ablation::{build_removal_set, Method};
use nwp_core::headfit::HeadProblem;
use nwp_core::representer::annotate_row;
use nwp_core::supportness::target_prob_gradient;

fn gemm(c: &mut Criterion) {
    let a = dense(512, 32, 1);
    let b = dense(32, 256, 2);
    c.bench_function("matmul 512x32x256", |bench| bench.iter(|| black_box(a.matmul(&b))));
}

fn head_objective(c: &mut Criterion) {
    let features = dense(4096, 32, 3);
    let targets: Vec<u32> = (0..4096u32).map(|i| (i * 31) % 256).collect();
    let problem = HeadProblem::new(&features, &targets, 256, 1e-3).unwrap();
    let head = dense(256, 32, 4).scale(0.1);
    c.bench_function("head loss+gradient N=4096 V=256 D=32", |bench| bench.iter(|| black_box(problem.evaluate(&head))));
}

fn model(c: &mut Criterion) {
    let (snap, corpus) = model_and_corpus(50);
    let window: Vec<u32> = corpus.docs()[0].iter().copied().take(snap.config.context).collect();
    c.bench_function("window forward, default model", |bench| {
        bench.iter(|| black_box(snap.window_forward(&window, true)))
    });
    let id = corpus.len() / 2;
    c.bench_function("per-sample target-probability gradient", |bench| {
        bench.iter(|| black_box(target_prob_gradient(&snap, &corpus, id).unwrap()))
    });
}

fn soft_sampling(c: &mut Criterion) {
    let annotations: Vec<_> = (0..40_000)
        .map(|i| {
            let s = (i % 1000) as f64 / 1000.0;
            annotate_row(i, 0, &[1.0 - s, s], 0.9)
        })
        .collect();
    c.bench_function("soft retention draw, 40k samples", |bench| {
        bench.iter(|| black_box(build_removal_set(&annotations, Method::Soft, 7)))
    });
}

criterion_group!(benches, gemm, head_objective, model, soft_sampling);
criterion_main!(benches);
