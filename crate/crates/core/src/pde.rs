//! Explicit conservative finite-volume solver for `∂ₜp = Δf(p)` and its
//! drift-perturbed form `∂ₜp = div(∇f(p) + p∇β)`, both with zero flux
//! through the boundary.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DensityField, Grid, Point};
use crate::nonlinearity::Nonlinearity;

pub const CFL_SAFETY: f64 = 0.45;
/// Boundary gradient tolerance for perturbation potentials.
pub const BOUNDARY_GRADIENT_TOL: f64 = 1e-10;

type PointFn<T> = Arc<dyn Fn(Point) -> T + Send + Sync>;

#[derive(Clone)]
pub enum PotentialKind {
    Zero,
    /// `Σ aₖ cos(kπ(x − lo)/L)` along one axis.
    CosineSeries { axis: usize, lo: f64, len: f64, modes: Vec<(f64, f64)> },
    /// `a Π_axes sin²(kπ(xᵢ − loᵢ)/Lᵢ)`; value and full gradient vanish on the boundary.
    SineSquared { dim: usize, lo: [f64; 2], len: [f64; 2], k: f64, amplitude: f64 },
    Custom { value: PointFn<f64>, gradient: PointFn<[f64; 2]>, hessian: PointFn<[[f64; 2]; 2]> },
}

impl fmt::Debug for PotentialKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Zero => f.write_str("Zero"),
            Self::CosineSeries { axis, modes, .. } => write!(f, "CosineSeries(axis {axis}, {modes:?})"),
            Self::SineSquared { k, amplitude, .. } => write!(f, "SineSquared(k {k}, a {amplitude})"),
            Self::Custom { .. } => f.write_str("Custom"),
        }
    }
}

/// A smooth potential `β` whose gradient drives the perturbed dynamics.
#[derive(Debug, Clone)]
pub struct PerturbationPotential {
    kind: PotentialKind,
}

impl PerturbationPotential {
    pub fn zero() -> Self {
        Self { kind: PotentialKind::Zero }
    }

    /// `amplitude · cos(kπ(x − lo)/L)` along `axis` of `grid`.
    pub fn cosine(grid: &Grid, axis: usize, k: f64, amplitude: f64) -> Self {
        Self::cosine_series(grid, axis, vec![(k, amplitude)])
    }

    pub fn cosine_series(grid: &Grid, axis: usize, modes: Vec<(f64, f64)>) -> Self {
        Self { kind: PotentialKind::CosineSeries { axis, lo: grid.lo(axis), len: grid.width(axis), modes } }
    }

    pub fn sine_squared(grid: &Grid, k: f64, amplitude: f64) -> Self {
        Self {
            kind: PotentialKind::SineSquared {
                dim: grid.dim(),
                lo: [grid.lo(0), grid.lo(1)],
                len: [grid.width(0), grid.width(1)],
                k,
                amplitude,
            },
        }
    }

    pub fn custom<V, G, H>(value: V, gradient: G, hessian: H) -> Self
    where
        V: Fn(Point) -> f64 + Send + Sync + 'static,
        G: Fn(Point) -> [f64; 2] + Send + Sync + 'static,
        H: Fn(Point) -> [[f64; 2]; 2] + Send + Sync + 'static,
    {
        Self {
            kind: PotentialKind::Custom { value: Arc::new(value), gradient: Arc::new(gradient), hessian: Arc::new(hessian) },
        }
    }

    pub fn kind(&self) -> &PotentialKind {
        &self.kind
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, PotentialKind::Zero)
    }

    pub fn value(&self, x: Point) -> f64 {
        match &self.kind {
            PotentialKind::Zero => 0.0,
            PotentialKind::CosineSeries { axis, lo, len, modes } => {
                let s = (x[*axis] - lo) / len;
                modes.iter().map(|(k, a)| a * (k * std::f64::consts::PI * s).cos()).sum()
            }
            PotentialKind::SineSquared { dim, lo, len, k, amplitude } => {
                let w = k * std::f64::consts::PI;
                (0..*dim).map(|a| (w * (x[a] - lo[a]) / len[a]).sin().powi(2)).product::<f64>() * amplitude
            }
            PotentialKind::Custom { value, .. } => value(x),
        }
    }

    pub fn gradient(&self, x: Point) -> [f64; 2] {
        match &self.kind {
            PotentialKind::Zero => [0.0; 2],
            PotentialKind::CosineSeries { axis, lo, len, modes } => {
                let s = (x[*axis] - lo) / len;
                let mut g = [0.0; 2];
                g[*axis] = modes
                    .iter()
                    .map(|(k, a)| {
                        let w = k * std::f64::consts::PI / len;
                        -a * w * (k * std::f64::consts::PI * s).sin()
                    })
                    .sum();
                g
            }
            PotentialKind::SineSquared { dim, lo, len, k, amplitude } => {
                let mut g = [0.0; 2];
                let w: Vec<f64> = (0..*dim).map(|a| k * std::f64::consts::PI / len[a]).collect();
                let sq: Vec<f64> = (0..*dim).map(|a| (w[a] * (x[a] - lo[a])).sin().powi(2)).collect();
                for a in 0..*dim {
                    let t = w[a] * (x[a] - lo[a]);
                    let d = w[a] * (2.0 * t).sin();
                    let others: f64 = (0..*dim).filter(|b| *b != a).map(|b| sq[b]).product();
                    g[a] = amplitude * d * others;
                }
                g
            }
            PotentialKind::Custom { gradient, .. } => gradient(x),
        }
    }

    pub fn hessian(&self, x: Point) -> [[f64; 2]; 2] {
        match &self.kind {
            PotentialKind::Zero => [[0.0; 2]; 2],
            PotentialKind::CosineSeries { axis, lo, len, modes } => {
                let s = (x[*axis] - lo) / len;
                let mut h = [[0.0; 2]; 2];
                h[*axis][*axis] = modes
                    .iter()
                    .map(|(k, a)| {
                        let w = k * std::f64::consts::PI / len;
                        -a * w * w * (k * std::f64::consts::PI * s).cos()
                    })
                    .sum();
                h
            }
            PotentialKind::SineSquared { dim, lo, len, k, amplitude } => {
                let w: Vec<f64> = (0..*dim).map(|a| k * std::f64::consts::PI / len[a]).collect();
                let t: Vec<f64> = (0..*dim).map(|a| w[a] * (x[a] - lo[a])).collect();
                let sq: Vec<f64> = t.iter().map(|t| t.sin().powi(2)).collect();
                let d1: Vec<f64> = (0..*dim).map(|a| w[a] * (2.0 * t[a]).sin()).collect();
                let d2: Vec<f64> = (0..*dim).map(|a| 2.0 * w[a] * w[a] * (2.0 * t[a]).cos()).collect();
                let mut h = [[0.0; 2]; 2];
                for a in 0..*dim {
                    for b in 0..*dim {
                        h[a][b] = if a == b {
                            let others: f64 = (0..*dim).filter(|c| *c != a).map(|c| sq[c]).product();
                            amplitude * d2[a] * others
                        } else {
                            amplitude * d1[a] * d1[b]
                        };
                    }
                }
                h
            }
            PotentialKind::Custom { hessian, .. } => hessian(x),
        }
    }

    /// Laplacian `tr ∇²β`.
    pub fn laplacian(&self, x: Point, dim: usize) -> f64 {
        let h = self.hessian(x);
        (0..dim).map(|a| h[a][a]).sum()
    }

    /// Checks that the full gradient vanishes on the boundary of `grid`.
    pub fn validate_boundary(&self, grid: &Grid) -> Result<()> {
        for x in grid.boundary_samples(64) {
            let g = self.gradient(x);
            let norm = (0..grid.dim()).map(|a| g[a] * g[a]).sum::<f64>().sqrt();
            if norm > BOUNDARY_GRADIENT_TOL {
                return Err(Error::Input(format!(
                    "perturbation gradient {norm:e} at boundary point {x:?} exceeds {BOUNDARY_GRADIENT_TOL:e}"
                )));
            }
        }
        Ok(())
    }

    /// Normal components of `∇β` on every face, per axis.
    pub fn face_drift(&self, grid: &Grid) -> Vec<Vec<f64>> {
        (0..grid.dim())
            .map(|axis| {
                let mut out = vec![0.0; grid.n_faces(axis)];
                grid.for_each_interior_face(axis, |f, _, _| out[f] = self.gradient(grid.face_center(axis, f))[axis]);
                out
            })
            .collect()
    }

    /// Largest `|∇β|` component over faces and cell centres.
    pub fn max_gradient(&self, grid: &Grid) -> f64 {
        let faces = self.face_drift(grid).into_iter().flatten().map(f64::abs).fold(0.0, f64::max);
        let cells = grid
            .centers()
            .into_iter()
            .map(|x| {
                let g = self.gradient(x);
                g[0].abs().max(g[1].abs())
            })
            .fold(0.0, f64::max);
        faces.max(cells)
    }
}

/// `CFL_SAFETY · Δx² / (2d · max f′(p))`.
pub fn cfl_dt(p: &DensityField, nl: &Nonlinearity) -> f64 {
    cfl_dt_for_max(&p.grid, nl, p.max())
}

fn cfl_dt_for_max(grid: &Grid, nl: &Nonlinearity, p_max: f64) -> f64 {
    let dx = grid.min_dx();
    CFL_SAFETY * dx * dx / (2.0 * grid.dim() as f64 * nl.f_prime(p_max))
}

/// `Δx / (2 max|∇β|)`; infinite for a flat potential.
pub fn drift_cfl_dt(grid: &Grid, beta: &PerturbationPotential) -> f64 {
    let g = beta.max_gradient(grid);
    if g == 0.0 {
        f64::INFINITY
    } else {
        grid.min_dx() / (2.0 * g)
    }
}

/// Largest step within both CFL limits (evaluated on `p0`) that divides
/// `spacing` evenly; returns the step and the number of steps per spacing.
pub fn cfl_dt_dividing(
    p0: &DensityField,
    nl: &Nonlinearity,
    beta: Option<&PerturbationPotential>,
    spacing: f64,
) -> (f64, usize) {
    let limit = beta.map_or(f64::INFINITY, |b| drift_cfl_dt(&p0.grid, b)).min(cfl_dt(p0, nl));
    let per = (spacing / limit).ceil().max(1.0) as usize;
    (spacing / per as f64, per)
}

/// Face fluxes `G = ∇f(p) + p∇β`. Drift faces use central averaging while
/// the cell Péclet number `|∇β|Δx / f′` stays ≤ 2, upwinding beyond.
fn face_fluxes(grid: &Grid, p: &[f64], fp: &[f64], nl: &Nonlinearity, drift: Option<&[Vec<f64>]>) -> Vec<Vec<f64>> {
    (0..grid.dim())
        .map(|axis| {
            let inv = 1.0 / grid.dx(axis);
            let dx = grid.dx(axis);
            let mut g = vec![0.0; grid.n_faces(axis)];
            match drift {
                None => grid.for_each_interior_face(axis, |f, l, r| g[f] = (fp[r] - fp[l]) * inv),
                Some(drift) => {
                    let b = &drift[axis];
                    grid.for_each_interior_face(axis, |f, l, r| {
                        let diffusive = (fp[r] - fp[l]) * inv;
                        let bf = b[f];
                        let peclet = bf.abs() * dx / nl.f_prime(p[l].min(p[r]));
                        let p_face = if peclet <= 2.0 {
                            0.5 * (p[l] + p[r])
                        } else if bf < 0.0 {
                            // mass moves with velocity −∇β > 0
                            p[l]
                        } else {
                            p[r]
                        };
                        g[f] = diffusive + p_face * bf;
                    });
                }
            }
            g
        })
        .collect()
}

/// `div(∇f(p) + p∇β)` with the solver's face fluxes; `drift` holds the
/// face-normal components of `∇β` as produced by
/// [`PerturbationPotential::face_drift`].
pub fn flux_divergence(grid: &Grid, p: &[f64], nl: &Nonlinearity, drift: Option<&[Vec<f64>]>) -> Vec<f64> {
    let fp: Vec<f64> = p.iter().map(|&u| nl.f(u)).collect();
    grid.divergence_faces(&face_fluxes(grid, p, &fp, nl, drift))
}

fn check_step(p: &DensityField, nl: &Nonlinearity, dt: f64, drift_limit: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Input(format!("time step must be positive, got {dt}")));
    }
    let limit = (cfl_dt(p, nl) / CFL_SAFETY).min(drift_limit);
    if dt > limit {
        return Err(Error::Cfl { dt, limit });
    }
    Ok(())
}

fn advance(p: &DensityField, nl: &Nonlinearity, drift: Option<&[Vec<f64>]>, dt: f64) -> Result<DensityField> {
    let div = flux_divergence(&p.grid, &p.values, nl, drift);
    let values: Vec<f64> = p.values.iter().zip(&div).map(|(u, d)| u + dt * d).collect();
    if let Some((cell, &value)) = values.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::Stability { cell, value });
    }
    Ok(DensityField { grid: p.grid.clone(), values, time: p.time + dt })
}

/// One explicit step of `∂ₜp = Δf(p)`.
pub fn step_diffusion(p: &DensityField, nl: &Nonlinearity, dt: f64) -> Result<DensityField> {
    check_step(p, nl, dt, f64::INFINITY)?;
    advance(p, nl, None, dt)
}

/// One explicit step of `∂ₜp = div(∇f(p) + p∇β)`.
pub fn step_perturbed(p: &DensityField, nl: &Nonlinearity, beta: &PerturbationPotential, dt: f64) -> Result<DensityField> {
    check_step(p, nl, dt, drift_cfl_dt(&p.grid, beta))?;
    let drift = beta.face_drift(&p.grid);
    advance(p, nl, Some(&drift), dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaReport {
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub t_end: f64,
    pub dt: f64,
    /// Steps between stored snapshots. The final state is always stored.
    pub snapshot_every: usize,
}

/// Summary written next to snapshot dumps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub kappa_report: KappaReport,
    pub n_steps: usize,
    pub dt: f64,
    pub mass_drift: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub halted: Option<String>,
}

/// A completed solve: time-stamped snapshots plus diagnostics.
#[derive(Debug, Clone)]
pub struct PdeRun {
    pub nl: Nonlinearity,
    pub grid: Grid,
    pub dt: f64,
    pub snapshots: Vec<DensityField>,
    pub kappa_report: KappaReport,
    pub n_steps: usize,
    pub mass_drift: f64,
    pub perturbation: Option<PerturbationPotential>,
    /// Set when a perturbed run left the admissible band and stopped early.
    pub halted: Option<String>,
}

impl PdeRun {
    pub fn t_start(&self) -> f64 {
        self.snapshots[0].time
    }

    /// Last time reached; for halted perturbed runs this is the achieved horizon.
    pub fn t_end(&self) -> f64 {
        self.snapshots[self.snapshots.len() - 1].time
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    /// Snapshot stored at time `t`, matched to within a thousandth of a step.
    pub fn snapshot_at(&self, t: f64) -> Option<&DensityField> {
        let tol = 1e-3 * self.dt;
        self.snapshots.iter().find(|s| (s.time - t).abs() <= tol)
    }

    pub fn snapshot_index(&self, t: f64) -> Option<usize> {
        let tol = 1e-3 * self.dt;
        self.snapshots.iter().position(|s| (s.time - t).abs() <= tol)
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            kappa_report: self.kappa_report,
            n_steps: self.n_steps,
            dt: self.dt,
            mass_drift: self.mass_drift,
            t_start: self.t_start(),
            t_end: self.t_end(),
            halted: self.halted.clone(),
        }
    }
}

/// Admissible band `[1/(2κ̂), κ̂ + 1/(2κ̂)]` for perturbed runs, with
/// `κ̂ = max(max p₀, 1/min p₀)`.
pub fn perturbed_band(p0: &DensityField) -> (f64, f64) {
    let kappa = p0.max().max(1.0 / p0.min());
    (0.5 / kappa, kappa + 0.5 / kappa)
}

/// Advances `p0` from `p0.time` to `opts.t_end`.
///
/// Unperturbed runs must respect the comparison principle
/// `min p₀ ≤ p ≤ max p₀` (to 1e−10); a violation is an error. Perturbed runs
/// stop early, with `halted` set, once the density leaves [`perturbed_band`].
pub fn solve(
    p0: &DensityField,
    nl: &Nonlinearity,
    beta: Option<&PerturbationPotential>,
    opts: &SolveOptions,
) -> Result<PdeRun> {
    let grid = p0.grid.clone();
    if p0.min() <= 0.0 {
        return Err(Error::Input(format!("initial density must be strictly positive, min is {}", p0.min())));
    }
    let mass0 = p0.mass();
    if (mass0 - 1.0).abs() > 1e-8 {
        return Err(Error::Input(format!("initial density has mass {mass0}, expected 1")));
    }
    if opts.snapshot_every == 0 {
        return Err(Error::Input("snapshot_every must be at least 1".into()));
    }
    let span = opts.t_end - p0.time;
    if !(opts.dt > 0.0) || span < 0.0 {
        return Err(Error::Input(format!("bad time stepping: dt {} over [{}, {}]", opts.dt, p0.time, opts.t_end)));
    }
    let n_steps = (span / opts.dt).round() as usize;
    if (n_steps as f64 * opts.dt - span).abs() > 1e-9 * span.max(opts.dt) {
        return Err(Error::Input(format!("dt {} does not divide the horizon {span}", opts.dt)));
    }
    let drift = match beta {
        Some(b) => {
            b.validate_boundary(&grid)?;
            let limit = drift_cfl_dt(&grid, b);
            if opts.dt > limit {
                return Err(Error::Cfl { dt: opts.dt, limit });
            }
            Some(b.face_drift(&grid))
        }
        None => None,
    };
    let (lo, hi) = match beta {
        Some(_) => perturbed_band(p0),
        None => (p0.min() - 1e-10, p0.max() + 1e-10),
    };
    let diffusion_limit = |p: &DensityField| cfl_dt(p, nl) / CFL_SAFETY;

    let t0 = p0.time;
    let mut current = p0.clone();
    let mut snapshots = vec![p0.clone()];
    let mut kappa = KappaReport { min: p0.min(), max: p0.max() };
    let mut mass_drift: f64 = 0.0;
    let mut halted = None;
    let mut steps_done = 0;
    for step in 1..=n_steps {
        let limit = diffusion_limit(&current);
        if opts.dt > limit {
            return Err(Error::Cfl { dt: opts.dt, limit });
        }
        let mut next = advance(&current, nl, drift.as_deref(), opts.dt)?;
        next.time = t0 + step as f64 * opts.dt;
        let (mn, mx) = (next.min(), next.max());
        if mn < lo || mx > hi {
            let value = if mn < lo { mn } else { mx };
            if beta.is_none() {
                return Err(Error::Bounds { t: next.time, value, lo, hi });
            }
            halted = Some(format!("density {value} left [{lo}, {hi}] at t = {}", next.time));
            break;
        }
        kappa.min = kappa.min.min(mn);
        kappa.max = kappa.max.max(mx);
        current = next;
        steps_done = step;
        if step % opts.snapshot_every == 0 || step == n_steps {
            mass_drift = mass_drift.max((current.mass() - mass0).abs());
            snapshots.push(current.clone());
        }
    }
    if halted.is_some() && snapshots.last().map(|s| s.time) != Some(current.time) {
        mass_drift = mass_drift.max((current.mass() - mass0).abs());
        snapshots.push(current);
    }
    Ok(PdeRun {
        nl: nl.clone(),
        grid,
        dt: opts.dt,
        snapshots,
        kappa_report: kappa,
        n_steps: steps_done,
        mass_drift,
        perturbation: beta.cloned(),
        halted,
    })
}
