//! Wasserstein slopes, flows and HWI on solver output.

mod common;

use std::f64::consts::PI;

use common::*;
use trajent_core::transport::{
    curve_metric_slope, hwi_check, velocity_and_flow_check, w2_1d, w2_discrete, CostMatrix,
};
use trajent_core::{entropy_slope_comparison, DensityField, Grid, PerturbationPotential};

#[test]
fn exact_w2_matches_network_simplex_at_n_400() {
    let g = Grid::interval(0.0, 1.0, 400).unwrap();
    let (p, q) = (cosine_density(&g, 0.5), DensityField::uniform(g.clone()));
    let dx = g.cell_volume();
    let wa: Vec<f64> = p.values.iter().map(|v| v * dx).collect();
    let wb: Vec<f64> = q.values.iter().map(|v| v * dx).collect();
    let pts = g.centers();
    let exact = w2_discrete(&wa, &wb, &CostMatrix::squared_euclidean(&pts, &pts)).unwrap();
    let w = w2_1d(&p, &q).unwrap();
    assert!((w - exact).abs() <= 1e-3, "{w} vs {exact}");
}

#[test]
fn stationary_curve_has_zero_slope() {
    let run = run_from(&DensityField::uniform(grid()), None, 0.01, 1e-4);
    let report = curve_metric_slope(&run, 0.0, &[64, 32, 16, 8, 4, 2, 1]).unwrap();
    assert_eq!(report.analytic_slope, 0.0);
    assert!(report.finite_difference_slopes.iter().all(|s| *s <= 1e-6));
}

#[test]
fn potential_drives_the_uniform_state_at_its_gradient_norm() {
    let b = beta(1.0, 0.1);
    let run = run_from(&DensityField::uniform(grid()), Some(&b), 0.01, 1e-4);
    let report = curve_metric_slope(&run, 0.0, &[8, 4, 2, 1]).unwrap();
    let expected = 0.1 * PI / 2f64.sqrt();
    assert!((report.analytic_slope / expected - 1.0).abs() <= 1e-4);
    assert!(report.relative_error_at(1e-4).unwrap() <= 0.02);
}

#[test]
fn entropy_ratio_along_the_curve_is_minus_root_fisher() {
    let run = benchmark_run(None);
    let t0 = 0.05;
    let start = run.snapshot_at(t0).unwrap().clone();
    let b = PerturbationPotential::cosine(&grid(), 0, 2.0, 0.1);
    let perturbed = run_from(&start, Some(&b), t0 + 1e-3, 1e-4);
    let report = entropy_slope_comparison(&run, &[("generic", &perturbed)], t0, 1).unwrap();
    let fw = report.entropy_slope_unperturbed.unwrap();
    let ratio = report.entropy_ratio_finite_difference.unwrap();
    assert!((ratio / fw - 1.0).abs() <= 0.03, "{ratio} vs {fw}");
    let generic = &report.entropy_slope_perturbed[0];
    assert!(fw <= generic.analytic - 1e-8);
    assert!(generic.gap > 0.0);
    assert!(generic.finite_difference.unwrap() > ratio);
}

#[test]
fn pushforward_matches_the_solver_and_refines() {
    let run = run_from(&p0(), None, 0.02, 1e-4);
    let a = velocity_and_flow_check(&run, 0.01, 0.011).unwrap();
    let b = velocity_and_flow_check(&run, 0.01, 0.0105).unwrap();
    assert!(a.l1_error <= 5e-3, "{}", a.l1_error);
    assert!(a.l1_error / b.l1_error >= 1.5, "{} -> {}", a.l1_error, b.l1_error);
    assert_eq!((a.clamped, a.warning.as_deref()), (0, None));
}

#[test]
fn hwi_holds_along_the_flow_despite_boundary_drift() {
    let run = run_from(&p0(), None, T_END, 1e-2);
    let r = hwi_check(&run.snapshots[0], run.snapshots.last().unwrap(), &nl()).unwrap();
    assert!(r.holds, "{r:?}");
    // boundary values move with the flow, which is flagged but not fatal
    assert!(r.lhs > 0.0 && r.warning.is_some());
}
