use criterion::{black_box, criterion_group, criterion_main, Criterion};
use gfront_core::{BuiltinField, Evolver, GridField, GridSpec, VelocityField};

fn kernel_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("kernel_step");
    for &n in &[64usize, 128, 256] {
        let field = BuiltinField::cellular(2.0);
        let grid = GridSpec::unit_cell(2, n).with_field(&field);
        let mut u = GridField::from_fn(&grid, |x| (6.0 * x[0]).sin() * (4.0 * x[1]).cos());
        let mut ev = Evolver::new(&field, &grid, &[1.0, 0.0], 0.5).unwrap();
        group.bench_function(format!("cellular_steady_n{n}"), |b| {
            b.iter(|| ev.step(black_box(&mut u)))
        });
    }
    let field = BuiltinField::traveling_sin(1.0);
    let grid = GridSpec::unit_cell(2, 128).with_field(&field);
    let mut u = GridField::constant(&grid, 0.0);
    let mut ev = Evolver::new(&field, &grid, &[1.0, 0.0], 0.5).unwrap();
    group.bench_function("traveling_unsteady_n128", |b| {
        b.iter(|| ev.step(black_box(&mut u)))
    });
    group.finish();
}

fn field_sampling(c: &mut Criterion) {
    let field = BuiltinField::traveling_sin(1.0);
    let grid = GridSpec::unit_cell(2, 256);
    let axes = grid.axes();
    let mut out = vec![vec![0.0; grid.cells()]; 2];
    c.bench_function("traveling_sample_n256", |b| {
        b.iter(|| field.sample_axes(black_box(&axes), 0.3, &mut out))
    });
}

criterion_group!(benches, kernel_step, field_sampling);
criterion_main!(benches);
