use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use stoflow_bench::{ou, unit_square_grid};
use stoflow_core::classify::{classify, Schedule};
use stoflow_core::flow::{step_with_increment, BrownianDriver, DEFAULT_BLOWUP_RADIUS};
use stoflow_core::operators::{square_identity, OperatorKind};
use stoflow_core::volume::ln_u_volume;
use stoflow_core::FlowDirection;

fn flow_step(c: &mut Criterion) {
    let model = ou(2);
    let psi = model.psi().clone();
    let mut group = c.benchmark_group("flow_step");
    for per_axis in [4usize, 16, 64] {
        let grid = unit_square_grid(per_axis);
        let driver = BrownianDriver::new(1, 2, 1e-3).unwrap();
        let db = driver.increment(0);
        group.bench_with_input(BenchmarkId::new("with_accumulators", grid.len()), &grid, |b, grid| {
            let mut state = grid.initial_state();
            b.iter(|| {
                step_with_increment(&model, &mut state, &db, 1e-3, Some(&*psi), FlowDirection::Forward, DEFAULT_BLOWUP_RADIUS).unwrap();
            })
        });
        group.bench_with_input(BenchmarkId::new("points_only", grid.len()), &grid, |b, grid| {
            let mut state = grid.initial_state();
            b.iter(|| {
                step_with_increment(&model, &mut state, &db, 1e-3, None, FlowDirection::Forward, DEFAULT_BLOWUP_RADIUS).unwrap();
            })
        });
    }
    group.finish();
}

fn volume(c: &mut Criterion) {
    let model = ou(2);
    let grid = unit_square_grid(32);
    let state = grid.initial_state();
    c.bench_function("ln_u_volume_1024_nodes", |b| b.iter(|| ln_u_volume(black_box(&state), &**model.psi(), &grid).unwrap()));
}

fn operators(c: &mut Criterion) {
    let model = ou(3);
    let x = [0.3, -1.2, 0.8];
    c.bench_function("sharp_adjoint_psi", |b| {
        b.iter(|| stoflow_core::operators::apply(&model, OperatorKind::SharpAdjoint, &**model.psi(), black_box(&x)).unwrap())
    });
    c.bench_function("square_identity_psi", |b| b.iter(|| square_identity(&model, &**model.psi(), black_box(&x)).unwrap()));
}

fn classification(c: &mut Criterion) {
    let model = ou(2);
    let schedule = Schedule::default();
    let mut group = c.benchmark_group("classify");
    group.sample_size(10);
    for flow in [FlowDirection::Forward, FlowDirection::Sharp] {
        group.bench_function(flow.to_string(), |b| b.iter(|| classify(&model, flow, &schedule).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, flow_step, volume, operators, classification);
criterion_main!(benches);
