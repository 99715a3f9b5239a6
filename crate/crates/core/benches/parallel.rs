use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array1, Array2};
use opbsde::chaos::{estimate_coefficients, BasisSpec, EstimateOptions, IndexSet};
use opbsde::models::{Generator, GeneratorSpec, TerminalFamily, TerminalSpec};
use opbsde::regression::{loss_and_gradient, LossBatch, MlpModel, StepProblem, Variant};
use opbsde::rng::stream;
use opbsde::simulation::PathSampler;
use opbsde::{Execution, TimeGrid};
use rand::Rng;
use rand_distr::StandardNormal;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn coefficients(c: &mut Criterion) {
    let grid = TimeGrid::uniform(1.0, 10).unwrap();
    let basis = BasisSpec::new(grid.clone(), 1).unwrap();
    let set = Arc::new(IndexSet::new(2, 10).unwrap());
    let payoff = TerminalSpec::new(TerminalFamily::PowerMax { power: 1.0 }, grid.clone()).unwrap();
    let sampler = PathSampler::new(grid, 1, None).unwrap();
    let mut group = c.benchmark_group("estimate_coefficients");
    group.sample_size(10);
    for (name, mode) in MODES {
        let mut opts = EstimateOptions::new(20_000, 1);
        opts.execution = mode;
        group.bench_with_input(BenchmarkId::from_parameter(name), &opts, |b, opts| {
            b.iter(|| black_box(estimate_coefficients(&payoff, &set, &basis, &sampler, opts).unwrap()))
        });
    }
    group.finish();
}

fn gradient(c: &mut Criterion) {
    let (n, input, hidden) = (10_000, 42, 63);
    let mut rng = stream(2, &[0]);
    let features = Array2::from_shape_fn((n, input), |_| rng.sample::<f64, _>(StandardNormal));
    let y_next = Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal));
    let dw = Array2::from_shape_fn((n, 1), |_| 0.3 * rng.sample::<f64, _>(StandardNormal));
    let model = MlpModel::he_uniform(input, hidden, 2, &mut rng);
    let generator = Generator::new(GeneratorSpec::Trig, 1).unwrap();
    let problem = StepProblem {
        generator: &generator,
        t: 0.0,
        dt: 0.1,
        variant: Variant::Implicit,
    };
    let batch = LossBatch {
        features: features.view(),
        y_next: y_next.view(),
        dw: dw.view(),
    };
    let mut group = c.benchmark_group("loss_and_gradient");
    for (name, mode) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| black_box(loss_and_gradient(&model, &batch, &problem, mode).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, coefficients, gradient);
criterion_main!(benches);
