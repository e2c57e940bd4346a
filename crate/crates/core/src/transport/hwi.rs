//! The HWI chain `𝓕(ρ₀) − 𝓕(ρ₁) ≤ −∫⟨∇f(ρ₀), ∇ψ − z⟩ dz ≤ √I(ρ₀) W₂(ρ₀, ρ₁)`.

use std::f64::consts::PI;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entropy::{dissipation_functional, entropy_functional};
use crate::error::{Error, Result};
use crate::grid::{DensityField, Grid};
use crate::nonlinearity::Nonlinearity;

use super::quantile::TransportPlan1D;

const BOUNDARY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HwiResult {
    pub lhs: f64,
    pub mid: f64,
    pub rhs: f64,
    pub tol: f64,
    pub holds: bool,
    /// Set when the two densities disagree on the boundary.
    pub warning: Option<String>,
}

/// Boundary values by cubic extrapolation from the four outermost cells.
fn boundary_values(p: &DensityField) -> (f64, f64) {
    const W: [f64; 4] = [35.0 / 16.0, -35.0 / 16.0, 21.0 / 16.0, -5.0 / 16.0];
    let v = &p.values;
    let n = v.len();
    let left = (0..4).map(|k| W[k] * v[k]).sum();
    let right = (0..4).map(|k| W[k] * v[n - 1 - k]).sum();
    (left, right)
}

/// Evaluates the three terms of the chain for two positive 1-D densities
/// on the same grid.
pub fn hwi_check(rho0: &DensityField, rho1: &DensityField, nl: &Nonlinearity) -> Result<HwiResult> {
    if rho0.grid != rho1.grid {
        return Err(Error::Input("both densities must live on the same grid".into()));
    }
    if rho0.grid.dim() != 1 {
        return Err(Error::Dimension("the HWI check is one-dimensional".into()));
    }
    if rho0.min() <= 0.0 || rho1.min() <= 0.0 {
        return Err(Error::Input("densities must be strictly positive".into()));
    }
    let grid = &rho0.grid;
    let n = grid.len();
    let warning = if n >= 4 {
        let (a, b) = (boundary_values(rho0), boundary_values(rho1));
        let gap = (a.0 - b.0).abs().max((a.1 - b.1).abs());
        (gap > BOUNDARY_TOL).then(|| format!("boundary values differ by {gap:e}"))
    } else {
        None
    };
    let plan = TransportPlan1D::new(rho0, rho1)?;
    let lhs = entropy_functional(rho0, nl)? - entropy_functional(rho1, nl)?;
    let f0: Vec<f64> = rho0.values.iter().map(|&u| nl.f(u)).collect();
    let grad_f = grid.gradient(&f0);
    let integrand: Vec<f64> =
        (0..n).map(|c| -grad_f[c][0] * (plan.map_values[c] - grid.center_axis(0, c))).collect();
    let mid = grid.integrate(&integrand);
    let rhs = dissipation_functional(rho0, nl)?.sqrt() * plan.w2;
    let tol = 1e-3 * (1.0 + rhs.abs());
    let holds = lhs <= mid + tol && mid <= rhs + tol;
    Ok(HwiResult { lhs, mid, rhs, tol, holds, warning })
}

/// A pair of smooth positive densities `1 + b cos(πx) + Σₖ aₖ sin(2kπx)` on
/// `grid` sharing `b`, hence equal boundary values. Deterministic in `seed`.
pub fn random_smooth_pair(grid: &Grid, seed: u64) -> Result<(DensityField, DensityField)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = move || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let b = 0.3 * (2.0 * unit() - 1.0);
    let mut make = |grid: &Grid| {
        let a: Vec<f64> = (1..=3).map(|_| 0.15 * (2.0 * unit() - 1.0)).collect();
        let lo = grid.lo(0);
        let len = grid.width(0);
        DensityField::from_fn(
            grid.clone(),
            move |x| {
                let s = (x[0] - lo) / len;
                let waves: f64 = a.iter().enumerate().map(|(k, ak)| ak * (2.0 * (k + 1) as f64 * PI * s).sin()).sum();
                (1.0 + b * (PI * s).cos() + waves) / len
            },
            0.0,
        )
    };
    Ok((make(grid)?, make(grid)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm2() -> Nonlinearity {
        Nonlinearity::porous_medium(2.0).unwrap()
    }

    #[test]
    fn identical_densities_collapse_the_chain() {
        let g = Grid::interval(0.0, 1.0, 100).unwrap();
        let p = DensityField::from_fn(g, |x| 1.0 + 0.3 * (PI * x[0]).cos(), 0.0).unwrap();
        let r = hwi_check(&p, &p, &pm2()).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.mid.abs() < 1e-12 && r.rhs.abs() < 1e-12);
        assert!(r.holds && r.warning.is_none());
    }

    #[test]
    fn random_pairs_share_boundary_values() {
        let g = Grid::interval(0.0, 1.0, 200).unwrap();
        for seed in 0..5 {
            let (a, b) = random_smooth_pair(&g, seed).unwrap();
            assert!(a.min() > 0.0 && b.min() > 0.0);
            assert!((a.mass() - 1.0).abs() < 1e-12);
            let r = hwi_check(&a, &b, &pm2()).unwrap();
            assert!(r.warning.is_none(), "{:?}", r.warning);
        }
    }

    #[test]
    fn mismatched_boundary_is_only_a_warning() {
        let g = Grid::interval(0.0, 1.0, 100).unwrap();
        let a = DensityField::from_fn(g.clone(), |x| 1.0 + 0.3 * (PI * x[0]).cos(), 0.0).unwrap();
        let b = DensityField::uniform(g);
        let r = hwi_check(&a, &b, &pm2()).unwrap();
        assert!(r.warning.is_some());
    }
}
