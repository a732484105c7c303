use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use subgoal_bench::all;
use subgoal_core::seqnmf::{loss_masked, update_h_masked, update_o_masked};
use subgoal_core::tensorops::{conv_forward, conv_transpose};

fn kernels(c: &mut Criterion) {
    for f in all() {
        let mut g = c.benchmark_group(f.name);
        g.bench_function("conv_forward", |b| {
            b.iter(|| conv_forward(black_box(&f.o), black_box(&f.h)))
        });
        g.bench_function("conv_transpose", |b| {
            b.iter(|| conv_transpose(black_box(&f.o), black_box(&f.x)))
        });
        // Past the activation iteration so the binary gradient is included.
        let iter = f.cfg.start_bin_loss_iter + 1;
        g.bench_function("update_h", |b| {
            b.iter(|| update_h_masked(&f.x, &f.o, black_box(&f.h), &f.cfg, iter, Some(&f.mask)))
        });
        g.bench_function("update_o", |b| {
            b.iter(|| update_o_masked(&f.x, black_box(&f.o), &f.h, &f.cfg, Some(&f.mask), iter))
        });
        g.bench_function("loss", |b| {
            b.iter(|| loss_masked(&f.x, &f.o, black_box(&f.h), &f.cfg, Some(&f.mask)))
        });
        g.finish();
    }
}

criterion_group!(benches, kernels);
criterion_main!(benches);
