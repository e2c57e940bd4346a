//! Entropy `𝓕(p) = ∫Φ(p)`, dissipation `I(p) = ∫|∇h(p)|²p`, the pointwise
//! dissipation functions `D`, `D^β`, and the integrated identity along a
//! solver run.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{pairwise_sum, DensityField, Grid};
use crate::nonlinearity::Nonlinearity;
use crate::pde::{flux_divergence, PdeRun, PerturbationPotential};

fn map_field(p: &DensityField, g: impl Fn(f64) -> Result<f64>) -> Result<Vec<f64>> {
    p.values.iter().map(|&u| g(u)).collect()
}

/// `h(p)` per cell.
pub fn h_field(p: &DensityField, nl: &Nonlinearity) -> Result<Vec<f64>> {
    map_field(p, |u| nl.h(u))
}

/// The pressure `v = φ(p)` per cell.
pub fn pressure_field(p: &DensityField, nl: &Nonlinearity) -> Result<Vec<f64>> {
    map_field(p, |u| nl.pressure(u))
}

/// Cell gradient of `h(p)` with the Neumann convention of [`Grid::gradient`].
pub fn grad_h(p: &DensityField, nl: &Nonlinearity) -> Result<Vec<[f64; 2]>> {
    Ok(p.grid.gradient(&h_field(p, nl)?))
}

/// `∇β` at cell centres, evaluated exactly.
pub fn potential_gradient_cells(grid: &Grid, beta: &PerturbationPotential) -> Vec<[f64; 2]> {
    grid.centers().into_iter().map(|x| beta.gradient(x)).collect()
}

fn dot(a: [f64; 2], b: [f64; 2], dim: usize) -> f64 {
    (0..dim).map(|k| a[k] * b[k]).sum()
}

/// `𝓕(p) = ∫Φ(p) dx` by the midpoint rule.
pub fn entropy_functional(p: &DensityField, nl: &Nonlinearity) -> Result<f64> {
    Ok(p.grid.integrate(&map_field(p, |u| nl.entropy_density(u))?))
}

/// `I(p) = ∫|∇h(p)|² p dx`.
pub fn dissipation_functional(p: &DensityField, nl: &Nonlinearity) -> Result<f64> {
    let d = p.grid.dim();
    let g = grad_h(p, nl)?;
    let integrand: Vec<f64> = g.iter().zip(&p.values).map(|(g, u)| dot(*g, *g, d) * u).collect();
    Ok(p.grid.integrate(&integrand))
}

/// `∫⟨∇h(p), ∇β⟩ p dx`, the perturbation cross term.
pub fn cross_term(p: &DensityField, nl: &Nonlinearity, beta: &PerturbationPotential) -> Result<f64> {
    let d = p.grid.dim();
    let g = grad_h(p, nl)?;
    let b = potential_gradient_cells(&p.grid, beta);
    let integrand: Vec<f64> = g.iter().zip(&b).zip(&p.values).map(|((g, b), u)| dot(*g, *b, d) * u).collect();
    Ok(p.grid.integrate(&integrand))
}

/// `D = φ′(p)Δf(p) + (f(p)/p)Δv` with the solver's conservative Laplacian.
pub fn dissipation_field(p: &DensityField, nl: &Nonlinearity) -> Result<Vec<f64>> {
    let lap_f = flux_divergence(&p.grid, &p.values, nl, None);
    let lap_v = p.grid.laplacian(&pressure_field(p, nl)?);
    p.values
        .iter()
        .zip(lap_f.iter().zip(&lap_v))
        .map(|(&u, (lf, lv))| Ok(nl.pressure_prime(u)? * lf + nl.f(u) / u * lv))
        .collect()
}

/// `D^β = φ′(p)div(∇f(p) + p∇β) + (f(p)/p)Δv − ⟨∇v, ∇β⟩`, using the
/// solver's perturbed flux divergence.
pub fn perturbed_dissipation_field(
    p: &DensityField,
    nl: &Nonlinearity,
    beta: &PerturbationPotential,
) -> Result<Vec<f64>> {
    let grid = &p.grid;
    let d = grid.dim();
    let drift = beta.face_drift(grid);
    let div = flux_divergence(grid, &p.values, nl, Some(&drift));
    let v = pressure_field(p, nl)?;
    let lap_v = grid.laplacian(&v);
    let grad_v = grid.gradient(&v);
    let grad_b = potential_gradient_cells(grid, beta);
    (0..grid.len())
        .map(|c| {
            let u = p.values[c];
            Ok(nl.pressure_prime(u)? * div[c] + nl.f(u) / u * lap_v[c] - dot(grad_v[c], grad_b[c], d))
        })
        .collect()
}

/// Both sides of the entropy dissipation identity along a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub times: Vec<f64>,
    /// `𝓕(p_t) − 𝓕(p_{t₀})`.
    pub lhs: Vec<f64>,
    /// `−∫(I + cross) ds` by the trapezoidal rule.
    pub rhs: Vec<f64>,
    pub abs_residual: Vec<f64>,
    pub rel_residual: Vec<f64>,
    pub entropy: Vec<f64>,
    pub dissipation: Vec<f64>,
    pub cross_term_series: Option<Vec<f64>>,
    /// `𝓕` nonincreasing, with 1e−10 slack per solver step.
    pub monotone: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentitySummary {
    pub max_rel_residual: f64,
    pub monotone: bool,
}

impl IdentityReport {
    /// Largest relative residual after the initial time.
    pub fn max_rel_residual(&self) -> f64 {
        self.rel_residual.iter().skip(1).copied().fold(0.0, f64::max)
    }

    pub fn final_rel_residual(&self) -> f64 {
        *self.rel_residual.last().unwrap_or(&0.0)
    }

    pub fn summary(&self) -> IdentitySummary {
        IdentitySummary { max_rel_residual: self.max_rel_residual(), monotone: self.monotone }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "lhs", "rhs", "residual"])?;
        for k in 0..self.times.len() {
            w.write_record(&[
                self.times[k].to_string(),
                self.lhs[k].to_string(),
                self.rhs[k].to_string(),
                self.abs_residual[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates the (perturbed) entropy dissipation identity on every snapshot
/// of `run`, using the run's own perturbation if it has one.
pub fn verify_identity(run: &PdeRun) -> Result<IdentityReport> {
    if run.snapshots.len() < 3 {
        return Err(crate::Error::Input(format!(
            "identity check needs at least 3 snapshots, run has {}",
            run.snapshots.len()
        )));
    }
    let nl = &run.nl;
    let beta = run.perturbation.as_ref();
    let times = run.times();
    let entropy = run.snapshots.iter().map(|s| entropy_functional(s, nl)).collect::<Result<Vec<_>>>()?;
    let dissipation = run.snapshots.iter().map(|s| dissipation_functional(s, nl)).collect::<Result<Vec<_>>>()?;
    let cross = match beta {
        Some(b) => Some(run.snapshots.iter().map(|s| cross_term(s, nl, b)).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let rate: Vec<f64> = match &cross {
        Some(c) => dissipation.iter().zip(c).map(|(i, c)| i + c).collect(),
        None => dissipation.clone(),
    };
    let mut pieces = Vec::with_capacity(times.len());
    let mut rhs = vec![0.0];
    for k in 1..times.len() {
        pieces.push(0.5 * (rate[k] + rate[k - 1]) * (times[k] - times[k - 1]));
        rhs.push(-pairwise_sum(&pieces));
    }
    let lhs: Vec<f64> = entropy.iter().map(|e| e - entropy[0]).collect();
    let abs_residual: Vec<f64> = lhs.iter().zip(&rhs).map(|(l, r)| (l - r).abs()).collect();
    let rel_residual = abs_residual.iter().zip(&rhs).map(|(a, r)| a / r.abs().max(1e-12)).collect();
    let monotone = (1..times.len()).all(|k| {
        let steps = ((times[k] - times[k - 1]) / run.dt).round().max(1.0);
        entropy[k] <= entropy[k - 1] + 1e-10 * steps
    });
    Ok(IdentityReport {
        times,
        lhs,
        rhs,
        abs_residual,
        rel_residual,
        entropy,
        dissipation,
        cross_term_series: cross,
        monotone,
    })
}
