//! Flow map of the velocity field `u^β = −∇(β + h(p^β))` and the
//! continuity-equation check `(Λ_{t₁})_# p_{t₀} = p_{t₁}` in 1-D.

use serde::{Deserialize, Serialize};

use crate::entropy::h_field;
use crate::error::{Error, Result};
use crate::grid::DensityField;
use crate::pde::PdeRun;

/// RK4 substeps per snapshot interval.
const SUBSTEPS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub t0: f64,
    pub t1: f64,
    pub l1_error: f64,
    /// Seeds that left the domain and were clamped back.
    pub clamped: usize,
    pub warning: Option<String>,
}

/// Face values of `∂ₓh(p)`, zero on the boundary faces.
fn face_grad_h(p: &DensityField, run: &PdeRun) -> Result<Vec<f64>> {
    Ok(p.grid.face_gradient(&h_field(p, &run.nl)?, 0))
}

struct Velocity<'a> {
    run: &'a PdeRun,
    first: usize,
    faces: Vec<Vec<f64>>,
}

impl Velocity<'_> {
    fn at(&self, t: f64, y: f64) -> f64 {
        let grid = &self.run.grid;
        let times = &self.run.snapshots;
        let last = self.first + self.faces.len() - 1;
        // time bracket within the precomputed snapshot range
        let mut k = self.first;
        while k < last && times[k + 1].time <= t {
            k += 1;
        }
        let k = k.min(last.saturating_sub(1)).max(self.first);
        let (ta, tb) = (times[k].time, times[(k + 1).min(last)].time);
        let w = if tb > ta { ((t - ta) / (tb - ta)).clamp(0.0, 1.0) } else { 0.0 };
        let space = |g: &[f64]| {
            let n = grid.n_cells(0);
            let s = ((y - grid.lo(0)) / grid.dx(0)).clamp(0.0, n as f64);
            let i = (s.floor() as usize).min(n - 1);
            let a = s - i as f64;
            (1.0 - a) * g[i] + a * g[i + 1]
        };
        let a = space(&self.faces[k - self.first]);
        let b = space(&self.faces[(k + 1).min(last) - self.first]);
        let grad_h = (1.0 - w) * a + w * b;
        let grad_beta = self.run.perturbation.as_ref().map_or(0.0, |b| b.gradient([y, 0.0])[0]);
        -(grad_beta + grad_h)
    }
}

/// Transports the face positions of the `t0` snapshot along the velocity
/// field with classical RK4 and compares the pushforward with the `t1`
/// snapshot in L¹.
pub fn velocity_and_flow_check(run: &PdeRun, t0: f64, t1: f64) -> Result<FlowReport> {
    let grid = &run.grid;
    if grid.dim() != 1 {
        return Err(Error::Dimension("the flow check is one-dimensional".into()));
    }
    if !(t1 > t0) {
        return Err(Error::Input(format!("need t0 < t1, got {t0} and {t1}")));
    }
    let i0 = run.snapshot_index(t0).ok_or_else(|| Error::Input(format!("no snapshot at t0 = {t0}")))?;
    let i1 = run.snapshot_index(t1).ok_or_else(|| Error::Input(format!("no snapshot at t1 = {t1}")))?;
    let faces = (i0..=i1).map(|k| face_grad_h(&run.snapshots[k], run)).collect::<Result<Vec<_>>>()?;
    let vel = Velocity { run, first: i0, faces };

    let n = grid.n_cells(0);
    let (lo, hi) = (grid.lo(0), grid.hi(0));
    let mut ys: Vec<f64> = (0..=n).map(|k| grid.face_axis(0, k)).collect();
    let steps = (i1 - i0) * SUBSTEPS;
    let h = (t1 - t0) / steps as f64;
    let mut clamped = 0;
    for s in 0..steps {
        let t = t0 + s as f64 * h;
        for y in ys.iter_mut() {
            let k1 = vel.at(t, *y);
            let k2 = vel.at(t + 0.5 * h, *y + 0.5 * h * k1);
            let k3 = vel.at(t + 0.5 * h, *y + 0.5 * h * k2);
            let k4 = vel.at(t + h, *y + h * k3);
            let next = *y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if next < lo || next > hi {
                clamped += 1;
            }
            *y = next.clamp(lo, hi);
        }
    }
    if ys.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Solver("flow map lost monotonicity; reduce t1 − t0".into()));
    }
    // Pushforward CDF: cubic Hermite through (Λ(yₖ), F₀(yₖ)) with slopes equal
    // to the transported face densities ρ₀(yₖ)/Λ′(yₖ).
    let p0 = &run.snapshots[i0];
    let dx = grid.dx(0);
    let mut cum = vec![0.0; n + 1];
    for k in 0..n {
        cum[k + 1] = cum[k] + p0.values[k] * dx;
    }
    let slopes: Vec<f64> = (0..=n)
        .map(|k| {
            let rho = match k {
                0 => p0.values[0],
                k if k == n => p0.values[n - 1],
                k => 0.5 * (p0.values[k - 1] + p0.values[k]),
            };
            let (a, b) = (k.saturating_sub(1), (k + 1).min(n));
            let stretch = (ys[b] - ys[a]) / (grid.face_axis(0, b) - grid.face_axis(0, a));
            rho / stretch
        })
        .collect();
    let cdf = |x: f64| -> f64 {
        if x <= ys[0] {
            return 0.0;
        }
        if x >= ys[n] {
            return cum[n];
        }
        let k = (ys.partition_point(|y| *y <= x) - 1).min(n - 1);
        let span = ys[k + 1] - ys[k];
        if span <= 0.0 {
            return cum[k + 1];
        }
        hermite(x, ys[k], span, cum[k], cum[k + 1], slopes[k], slopes[k + 1])
    };
    let grid_cum: Vec<f64> = (0..=n).map(|k| cdf(grid.face_axis(0, k))).collect();
    let values: Vec<f64> = (0..n).map(|k| (grid_cum[k + 1] - grid_cum[k]) / dx).collect();
    let pushed = DensityField::new(grid.clone(), values, t1)?;
    let l1_error = pushed.l1_distance(&run.snapshots[i1])?;
    let warning = (clamped > 0).then(|| format!("{clamped} flow positions left the domain and were clamped"));
    Ok(FlowReport { t0, t1, l1_error, clamped, warning })
}

/// Cubic Hermite interpolant on `[y0, y0 + span]`, clamped to the end values.
fn hermite(x: f64, y0: f64, span: f64, f0: f64, f1: f64, d0: f64, d1: f64) -> f64 {
    let s = (x - y0) / span;
    let (s2, s3) = (s * s, s * s * s);
    let v = (2.0 * s3 - 3.0 * s2 + 1.0) * f0
        + (s3 - 2.0 * s2 + s) * span * d0
        + (-2.0 * s3 + 3.0 * s2) * f1
        + (s3 - s2) * span * d1;
    v.clamp(f0.min(f1), f0.max(f1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::nonlinearity::Nonlinearity;
    use crate::pde::{cfl_dt, solve, SolveOptions};

    #[test]
    fn stationary_flow_is_identity() {
        let g = Grid::interval(0.0, 1.0, 50).unwrap();
        let p = DensityField::uniform(g);
        let nl = Nonlinearity::porous_medium(2.0).unwrap();
        let dt = cfl_dt(&p, &nl);
        let run = solve(&p, &nl, None, &SolveOptions { t_end: 40.0 * dt, dt, snapshot_every: 10 }).unwrap();
        let r = velocity_and_flow_check(&run, 0.0, run.t_end()).unwrap();
        assert!(r.l1_error < 1e-12);
        assert_eq!(r.clamped, 0);
    }
}
