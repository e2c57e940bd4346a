use std::f64::consts::PI;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use trajent_core::pde::{cfl_dt, cfl_dt_dividing, solve, SolveOptions};
use trajent_core::transport::{w2_1d, w2_discrete, CostMatrix, TransportPlan1D};
use trajent_core::{
    dissipation_functional, simulate_ensemble, step_diffusion, step_perturbed, DensityField, EnsembleOptions, Grid,
    Nonlinearity, PerturbationPotential,
};

fn cosine(n: usize, k: f64) -> DensityField {
    let g = Grid::interval(0.0, 1.0, n).unwrap();
    DensityField::from_fn(g, |x| 1.0 + 0.5 * (k * PI * x[0]).cos(), 0.0).unwrap().normalized().unwrap()
}

fn pde_step(c: &mut Criterion) {
    let nl = Nonlinearity::porous_medium(2.0).unwrap();
    let mut group = c.benchmark_group("pde_step");
    for n in [200, 1000] {
        let p = cosine(n, 1.0);
        let dt = cfl_dt(&p, &nl);
        let beta = PerturbationPotential::cosine(&p.grid, 0, 1.0, 0.1);
        group.bench_with_input(BenchmarkId::new("diffusion", n), &p, |b, p| {
            b.iter(|| step_diffusion(black_box(p), &nl, dt).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("perturbed", n), &p, |b, p| {
            b.iter(|| step_perturbed(black_box(p), &nl, &beta, dt).unwrap())
        });
    }
    let g2 = Grid::rectangle([0.0, 1.0], [0.0, 1.0], [64, 64]).unwrap();
    let p2 = DensityField::from_fn(g2, |x| 1.0 + 0.3 * (PI * x[0]).cos() * (PI * x[1]).cos(), 0.0).unwrap();
    let dt2 = cfl_dt(&p2, &nl);
    group.bench_function("diffusion_2d_64x64", |b| b.iter(|| step_diffusion(black_box(&p2), &nl, dt2).unwrap()));
    group.finish();

    c.bench_function("dissipation_functional_400", |b| {
        let p = cosine(400, 1.0);
        b.iter(|| dissipation_functional(black_box(&p), &nl).unwrap())
    });
}

fn ensemble(c: &mut Criterion) {
    let nl = Nonlinearity::porous_medium(2.0).unwrap();
    let p = cosine(200, 1.0);
    let (dt, per) = cfl_dt_dividing(&p, &nl, None, 1e-4);
    let run = solve(&p, &nl, None, &SolveOptions { t_end: 0.01, dt, snapshot_every: per }).unwrap();
    let mut group = c.benchmark_group("ensemble");
    group.sample_size(10);
    group.bench_function("1000_particles_100_steps", |b| {
        b.iter(|| simulate_ensemble(&run, &EnsembleOptions::new(1000, 1e-4, 42)).unwrap())
    });
    group.finish();
}

fn transport(c: &mut Criterion) {
    let mut group = c.benchmark_group("w2_1d");
    for n in [200, 2000] {
        let (a, b) = (cosine(n, 1.0), cosine(n, 2.0));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| w2_1d(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();

    let (a, b) = (cosine(400, 1.0), cosine(400, 2.0));
    c.bench_function("transport_plan_400", |bench| bench.iter(|| TransportPlan1D::new(black_box(&a), &b).unwrap()));

    let mut group = c.benchmark_group("w2_discrete");
    group.sample_size(10);
    for n in [50, 200] {
        let (a, b) = (cosine(n, 1.0), cosine(n, 2.0));
        let dx = a.grid.cell_volume();
        let wa: Vec<f64> = a.values.iter().map(|v| v * dx).collect();
        let wb: Vec<f64> = b.values.iter().map(|v| v * dx).collect();
        let pts = a.grid.centers();
        let cost = CostMatrix::squared_euclidean(&pts, &pts);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| w2_discrete(black_box(&wa), &wb, &cost).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, pde_step, ensemble, transport);
criterion_main!(benches);
