//! Solver runs checked against the entropy identities and refinement.

mod common;

use std::f64::consts::PI;

use common::*;
use trajent_core::entropy::{cross_term, dissipation_functional};
use trajent_core::pde::{cfl_dt_dividing, flux_divergence, solve, SolveOptions};
use trajent_core::sde::{aggregate_to_bins, binned_l1};
use trajent_core::{entropy_functional, verify_identity, DensityField, Grid, Nonlinearity, PerturbationPotential};

#[test]
fn entropy_strictly_decreases_along_the_benchmark() {
    let run = run_from(&p0(), None, T_END, 1e-3);
    let nl = nl();
    let ent: Vec<f64> = run.snapshots.iter().map(|p| entropy_functional(p, &nl).unwrap()).collect();
    assert_eq!(ent.len(), 101);
    assert!(ent.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn perturbed_run_conserves_mass() {
    let b = beta(1.0, 0.1);
    let run = run_from(&p0(), Some(&b), T_END, 1e-3);
    assert!(run.halted.is_none());
    for p in &run.snapshots {
        assert!((p.mass() - 1.0).abs() <= 1e-8, "mass {} at t = {}", p.mass(), p.time);
    }
}

#[test]
fn perturbed_identity_residual_includes_cross_term() {
    let b = beta(1.0, 0.1);
    let report = verify_identity(&run_from(&p0(), Some(&b), T_END, 1e-3)).unwrap();
    assert!(report.final_rel_residual() <= 0.02, "{}", report.final_rel_residual());
    // the cross term is what closes the balance
    assert!(report.cross_term_series.as_ref().unwrap().iter().any(|c| c.abs() > 1e-3));
}

#[test]
fn refinement_converges_at_second_order() {
    let nl = nl();
    let t_end = 0.02;
    let run_at = |n: usize| {
        let g = Grid::interval(0.0, 1.0, n).unwrap();
        let p = cosine_density(&g, 0.5);
        let (dt, per) = cfl_dt_dividing(&p, &nl, None, t_end);
        let run = solve(&p, &nl, None, &SolveOptions { t_end, dt, snapshot_every: per }).unwrap();
        run.snapshots.last().unwrap().clone()
    };
    let finest = run_at(400);
    let error = |n: usize| {
        let coarse = run_at(n);
        binned_l1(&coarse.values, &aggregate_to_bins(&finest, &coarse.grid), &coarse.grid)
    };
    let (e25, e50, e100) = (error(25), error(50), error(100));
    assert!(e25 / e50 >= 3.0, "{e25} -> {e50}");
    assert!(e50 / e100 >= 3.0, "{e50} -> {e100}");
}

#[test]
fn gibbs_density_is_stationary_to_second_order() {
    let linear = Nonlinearity::linear();
    let residual = |n: usize| {
        let g = Grid::interval(0.0, 1.0, n).unwrap();
        let b = PerturbationPotential::cosine(&g, 0, 1.0, 0.5);
        let p = DensityField::from_fn(g.clone(), |x| (-b.value(x)).exp(), 0.0).unwrap().normalized().unwrap();
        let rate = flux_divergence(&g, &p.values, &linear, Some(&b.face_drift(&g)));
        rate.iter().fold(0.0f64, |m, r| m.max(r.abs()))
    };
    let (coarse, fine) = (residual(50), residual(100));
    assert!(coarse <= 1e-2, "{coarse}");
    assert!(coarse / fine >= 3.0, "{coarse} -> {fine}");
}

#[test]
fn two_point_entropy_slope_matches_dissipation() {
    let run = benchmark_run(None);
    let nl = nl();
    for k in [0, 100, 500, 999] {
        let (a, b) = (&run.snapshots[k], &run.snapshots[k + 1]);
        let slope = (entropy_functional(b, &nl).unwrap() - entropy_functional(a, &nl).unwrap()) / (b.time - a.time);
        let i = dissipation_functional(a, &nl).unwrap();
        assert!((slope / -i - 1.0).abs() <= 0.02, "t = {}: {slope} vs {}", a.time, -i);
    }
}

#[test]
fn uniform_density_has_no_cross_term() {
    // ∇h = 0 for uniform p
    let g = grid();
    let p = DensityField::uniform(g.clone());
    let b = PerturbationPotential::cosine(&g, 0, 1.0, 0.1);
    assert_eq!(cross_term(&p, &nl(), &b).unwrap(), 0.0);
    let i = dissipation_functional(&cosine_density(&g, 0.5), &nl()).unwrap();
    assert!((i / (PI * PI / 2.0) - 1.0).abs() < 0.01);
}
