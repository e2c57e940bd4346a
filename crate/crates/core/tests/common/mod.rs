//! The canonical desk-scale benchmark shared by the integration suites.
#![allow(dead_code)]

use std::f64::consts::PI;

use trajent_core::pde::{cfl_dt_dividing, solve, PdeRun, PerturbationPotential, SolveOptions};
use trajent_core::{DensityField, Grid, Nonlinearity};

pub const N_CELLS: usize = 200;
pub const T_END: f64 = 0.1;
pub const PARTICLE_DT: f64 = 1e-4;
pub const N_PARTICLES: usize = 10_000;
pub const SEED: u64 = 42;

pub fn grid() -> Grid {
    Grid::interval(0.0, 1.0, N_CELLS).unwrap()
}

pub fn nl() -> Nonlinearity {
    Nonlinearity::porous_medium(2.0).unwrap()
}

pub fn cosine_density(grid: &Grid, amplitude: f64) -> DensityField {
    DensityField::from_fn(grid.clone(), |x| 1.0 + amplitude * (PI * x[0]).cos(), 0.0).unwrap().normalized().unwrap()
}

pub fn p0() -> DensityField {
    cosine_density(&grid(), 0.5)
}

pub fn beta(k: f64, amplitude: f64) -> PerturbationPotential {
    PerturbationPotential::cosine(&grid(), 0, k, amplitude)
}

/// Solver run from `p` to `t_end` with snapshots every `spacing`.
pub fn run_from(p: &DensityField, beta: Option<&PerturbationPotential>, t_end: f64, spacing: f64) -> PdeRun {
    let (dt, per) = cfl_dt_dividing(p, &nl(), beta, spacing);
    solve(p, &nl(), beta, &SolveOptions { t_end, dt, snapshot_every: per }).unwrap()
}

pub fn benchmark_run(beta: Option<&PerturbationPotential>) -> PdeRun {
    run_from(&p0(), beta, T_END, PARTICLE_DT)
}
