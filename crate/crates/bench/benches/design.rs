use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use taskcomm::design::importance_table;
use taskcomm::{
    allocate_energy, multiuser_encoder, shared_basis, solve_reference, task_weights, BasisMethod,
    SolverOptions, WeightMode,
};
use taskcomm_bench::standard_instance;

fn encoder(c: &mut Criterion) {
    let mut group = c.benchmark_group("multiuser_encoder");
    for basis in [BasisMethod::Svd, BasisMethod::GramSchmidt] {
        let inst = standard_instance(10.0);
        group.bench_function(BenchmarkId::from_parameter(format!("{basis:?}")), |b| {
            b.iter(|| {
                multiuser_encoder(
                    black_box(&inst.stats),
                    &inst.channels,
                    WeightMode::Blended,
                    basis,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn allocation(c: &mut Criterion) {
    let mut group = c.benchmark_group("allocate_energy");
    for energy in [0.1, 10.0, 1000.0] {
        let inst = standard_instance(energy);
        let weights = task_weights(&inst.channels, WeightMode::Blended);
        let basis = shared_basis(&inst.stats, &weights, BasisMethod::Svd).unwrap();
        let importance = importance_table(&inst.stats.gram, &basis);
        group.bench_with_input(
            BenchmarkId::from_parameter(energy),
            &importance,
            |b, imp| b.iter(|| allocate_energy(black_box(imp), &inst.channels).unwrap()),
        );
    }
    group.finish();
}

fn reference(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_reference");
    group.sample_size(10);
    let opts = SolverOptions::default();
    for energy in [1.0, 100.0] {
        let inst = standard_instance(energy);
        group.bench_function(BenchmarkId::from_parameter(energy), |b| {
            b.iter(|| solve_reference(black_box(&inst.stats), &inst.channels, &opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, encoder, allocation, reference);
criterion_main!(benches);
