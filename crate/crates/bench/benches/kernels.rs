// SPDX-License-Identifier: MIT OR Apache-2.0

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use tracedit_bench::fixture;
use tracedit_core::editing::{init_edit_suite, PositionPolicy};
use tracedit_core::model::ForwardOptions;
use tracedit_core::trace::{trace_sample, NoiseSpec};
use tracedit_core::train_eval::{train_edits, TrainConfig};

fn forward(c: &mut Criterion) {
    let (model, _, prompts) = fixture();
    let p = &prompts[0];
    c.bench_function("forward", |b| {
        b.iter(|| model.forward(black_box(&p.ids), &ForwardOptions::default()).unwrap())
    });
}

fn trace(c: &mut Criterion) {
    let (model, _, prompts) = fixture();
    let p = &prompts[0];
    let noise = NoiseSpec::default();
    let mut g = c.benchmark_group("trace");
    g.sample_size(10);
    g.bench_function("trace_sample", |b| b.iter(|| trace_sample(&model, black_box(p), &noise).unwrap()));
    g.finish();
}

fn edit_step(c: &mut Criterion) {
    let (model, _, prompts) = fixture();
    let batch = &prompts[..16];
    let config = TrainConfig {
        epochs: 1,
        batch_size: 16,
        ..TrainConfig::desk_scale()
    };
    let mut g = c.benchmark_group("edit");
    g.sample_size(10);
    g.bench_function("train_step_batch16_mid", |b| {
        b.iter(|| {
            let mut suite = init_edit_suite(&model.config, &[4, 5, 6], 2, 2, PositionPolicy::Aspect, 0).unwrap();
            train_edits(&model, &mut suite, batch, &config, |_| {}).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, forward, trace, edit_step);
criterion_main!(benches);
