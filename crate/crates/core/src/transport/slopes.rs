//! Metric slopes of the solution curve and of the entropy along it.

use serde::{Deserialize, Serialize};

use crate::entropy::{entropy_functional, grad_h};
use crate::error::{Error, Result};
use crate::grid::{DensityField, Grid};
use crate::nonlinearity::Nonlinearity;
use crate::pde::{PdeRun, PerturbationPotential};

use super::quantile::w2_1d;

/// Spacing ladder in units of the snapshot spacing, coarsest first.
pub const DEFAULT_LADDER: [usize; 7] = [64, 32, 16, 8, 4, 2, 1];

/// `∇β` at cell centres as the Neumann grid gradient of `β(xᵢ)`, the same
/// discrete operator used for `∇h(p)`.
pub fn potential_grid_gradient(grid: &Grid, beta: &PerturbationPotential) -> Vec<[f64; 2]> {
    let values: Vec<f64> = grid.centers().into_iter().map(|x| beta.value(x)).collect();
    grid.gradient(&values)
}

fn weighted_inner(p: &DensityField, a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let d = p.grid.dim();
    let vals: Vec<f64> =
        (0..p.grid.len()).map(|c| (0..d).map(|k| a[c][k] * b[c][k]).sum::<f64>() * p.values[c]).collect();
    p.grid.integrate(&vals)
}

/// `‖∇h(p) + ∇β‖_{L²(p)}` (β term absent for `None`).
pub fn analytic_curve_slope(p: &DensityField, nl: &Nonlinearity, beta: Option<&PerturbationPotential>) -> Result<f64> {
    let mut g = grad_h(p, nl)?;
    if let Some(b) = beta {
        for (g, gb) in g.iter_mut().zip(potential_grid_gradient(&p.grid, b)) {
            g[0] += gb[0];
            g[1] += gb[1];
        }
    }
    Ok(weighted_inner(p, &g, &g).sqrt())
}

/// Entropy slopes at `p`: `−√I(p)` and `−⟨∇h, (∇h+∇β)/‖∇h+∇β‖⟩_{L²(p)}`.
pub fn entropy_slopes(p: &DensityField, nl: &Nonlinearity, beta: &PerturbationPotential) -> Result<(f64, f64)> {
    let gh = grad_h(p, nl)?;
    let gb = potential_grid_gradient(&p.grid, beta);
    let sum: Vec<[f64; 2]> = gh.iter().zip(&gb).map(|(a, b)| [a[0] + b[0], a[1] + b[1]]).collect();
    let i = weighted_inner(p, &gh, &gh);
    let norm = weighted_inner(p, &sum, &sum).sqrt();
    if norm <= 1e-12 * (1.0 + i.sqrt()) {
        return Err(Error::SingularDirection(norm));
    }
    Ok((-i.sqrt(), -weighted_inner(p, &gh, &sum) / norm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedSlope {
    pub label: String,
    pub analytic: f64,
    /// `Δ𝓕/ΔW₂` from the perturbed run, when it reaches the first spacing.
    pub finite_difference: Option<f64>,
    /// `FWp − FW`; nonnegative when the unperturbed curve is steeper.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SlopeReport {
    pub t0: f64,
    pub analytic_slope: f64,
    /// Spacings `t − t₀`, coarsest first.
    pub spacings: Vec<f64>,
    pub finite_difference_slopes: Vec<f64>,
    /// `2s(h) − s(2h)` for consecutive ladder entries.
    pub richardson: Vec<f64>,
    /// Errors against the analytic slope shrink as the spacing shrinks.
    pub monotone_convergence: bool,
    pub entropy_slope_unperturbed: Option<f64>,
    /// `Δ𝓕/ΔW₂` along the unperturbed run at the smallest spacing.
    pub entropy_ratio_finite_difference: Option<f64>,
    pub entropy_slope_perturbed: Vec<PerturbedSlope>,
}

impl SlopeReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Relative error of the finite-difference slope at `spacing`.
    pub fn relative_error_at(&self, spacing: f64) -> Option<f64> {
        let k = self.spacings.iter().position(|s| (s - spacing).abs() <= 1e-9 * spacing)?;
        Some((self.finite_difference_slopes[k] / self.analytic_slope - 1.0).abs())
    }
}

fn snapshot_spacing(run: &PdeRun) -> Result<f64> {
    if run.snapshots.len() < 2 {
        return Err(Error::Input("slope estimates need at least two snapshots".into()));
    }
    Ok(run.snapshots[1].time - run.snapshots[0].time)
}

/// Finite-difference metric slopes `W₂(p_t, p_{t₀})/(t − t₀)` along `run`
/// against `‖∇h(p_{t₀}) + ∇β‖_{L²(p_{t₀})}`, using the run's perturbation.
/// `ladder` lists spacings in snapshot intervals; entries past the end of
/// the run are skipped.
pub fn curve_metric_slope(run: &PdeRun, t0: f64, ladder: &[usize]) -> Result<SlopeReport> {
    let spacing = snapshot_spacing(run)?;
    let i0 = run.snapshot_index(t0).ok_or_else(|| Error::Input(format!("no snapshot at t0 = {t0}")))?;
    let p0 = &run.snapshots[i0];
    let analytic_slope = analytic_curve_slope(p0, &run.nl, run.perturbation.as_ref())?;
    let mut spacings = vec![];
    let mut slopes = vec![];
    for &k in ladder {
        if let Some(p) = run.snapshots.get(i0 + k) {
            let dt = p.time - p0.time;
            spacings.push(dt);
            slopes.push(w2_1d(p, p0)? / dt);
        }
    }
    if slopes.len() < 2 {
        return Err(Error::Input(format!("run has too few snapshots after t0 = {t0} (spacing {spacing})")));
    }
    let richardson = slopes.windows(2).map(|w| 2.0 * w[1] - w[0]).collect();
    let errors: Vec<f64> = slopes.iter().map(|s| (s - analytic_slope).abs()).collect();
    let monotone_convergence = errors.windows(2).all(|w| w[1] <= w[0] + 1e-9 * analytic_slope.max(1e-12));
    Ok(SlopeReport {
        t0,
        analytic_slope,
        spacings,
        finite_difference_slopes: slopes,
        richardson,
        monotone_convergence,
        ..SlopeReport::default()
    })
}

fn entropy_ratio(start: &DensityField, end: &DensityField, nl: &Nonlinearity) -> Result<f64> {
    let w = w2_1d(end, start)?;
    if w == 0.0 {
        return Ok(0.0);
    }
    Ok((entropy_functional(end, nl)? - entropy_functional(start, nl)?) / w)
}

/// Compares the entropy slope of the unperturbed curve at `t0` with that of
/// each perturbed run (all started from the unperturbed state at `t0`).
/// Finite-difference ratios `Δ𝓕/ΔW₂` use `fd_steps` snapshot intervals.
pub fn entropy_slope_comparison(
    unperturbed: &PdeRun,
    perturbed: &[(&str, &PdeRun)],
    t0: f64,
    fd_steps: usize,
) -> Result<SlopeReport> {
    let mut report = curve_metric_slope(unperturbed, t0, &DEFAULT_LADDER)?;
    let i0 = unperturbed.snapshot_index(t0).ok_or_else(|| Error::Input(format!("no snapshot at t0 = {t0}")))?;
    let p0 = &unperturbed.snapshots[i0];
    let nl = &unperturbed.nl;
    let fw = -crate::entropy::dissipation_functional(p0, nl)?.sqrt();
    report.entropy_slope_unperturbed = Some(fw);
    report.entropy_ratio_finite_difference =
        unperturbed.snapshots.get(i0 + fd_steps).map(|p| entropy_ratio(p0, p, nl)).transpose()?;
    for (label, run) in perturbed {
        let beta = run
            .perturbation
            .as_ref()
            .ok_or_else(|| Error::Input(format!("run '{label}' carries no perturbation")))?;
        let start = run.snapshot_at(t0).ok_or_else(|| Error::Input(format!("run '{label}' does not start at {t0}")))?;
        if start.l1_distance(p0)? > 1e-12 {
            return Err(Error::Input(format!("run '{label}' does not start from the unperturbed state")));
        }
        let (_, fwp) = entropy_slopes(p0, nl, beta)?;
        let k0 = run.snapshot_index(t0).unwrap_or(0);
        let finite_difference = run.snapshots.get(k0 + fd_steps).map(|p| entropy_ratio(p0, p, nl)).transpose()?;
        report.entropy_slope_perturbed.push(PerturbedSlope {
            label: label.to_string(),
            analytic: fwp,
            finite_difference,
            gap: fwp - fw,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn cosine(n: usize) -> DensityField {
        DensityField::from_fn(Grid::interval(0.0, 1.0, n).unwrap(), |x| 1.0 + 0.5 * (PI * x[0]).cos(), 0.0).unwrap()
    }

    #[test]
    fn unperturbed_entropy_slope_is_minus_root_i() {
        let p = cosine(200);
        let nl = Nonlinearity::porous_medium(2.0).unwrap();
        let (fw, fwp) = entropy_slopes(&p, &nl, &PerturbationPotential::zero()).unwrap();
        let i = crate::entropy::dissipation_functional(&p, &nl).unwrap();
        assert!((fw + i.sqrt()).abs() < 1e-12);
        assert!((fwp - fw).abs() < 1e-12);
    }

    #[test]
    fn collinear_potential_gives_equal_slopes() {
        let p = cosine(200);
        let nl = Nonlinearity::porous_medium(2.0).unwrap();
        // h(p) = 2(p − 1) = cos(πx), so β = ½cos(πx) has ∇β = ½∇h(p)
        let beta = PerturbationPotential::cosine(&p.grid, 0, 1.0, 0.5);
        let (fw, fwp) = entropy_slopes(&p, &nl, &beta).unwrap();
        assert!((fw - fwp).abs() < 1e-6);
    }

    #[test]
    fn opposite_potential_is_singular() {
        let p = cosine(100);
        let nl = Nonlinearity::porous_medium(2.0).unwrap();
        let beta = PerturbationPotential::cosine(&p.grid, 0, 1.0, -1.0);
        assert!(matches!(entropy_slopes(&p, &nl, &beta), Err(Error::SingularDirection(_))));
    }

    #[test]
    fn generic_potential_is_strictly_less_steep() {
        let p = cosine(200);
        let nl = Nonlinearity::porous_medium(2.0).unwrap();
        let beta = PerturbationPotential::cosine(&p.grid, 0, 2.0, 0.1);
        let (fw, fwp) = entropy_slopes(&p, &nl, &beta).unwrap();
        assert!(fw <= fwp - 1e-8);
    }
}
