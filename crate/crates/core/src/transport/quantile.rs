//! One-dimensional transport through quantile functions of piecewise-constant
//! densities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{pairwise_sum, DensityField, Grid};

const MASS_TOL: f64 = 1e-6;

/// Piecewise-linear CDF of a cell-constant density, stored by its knots.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantile {
    /// Cumulative masses at the faces, `cum[0] = 0`, `cum[n] = 1`.
    pub cum: Vec<f64>,
    /// Face positions.
    pub faces: Vec<f64>,
}

fn require_1d(p: &DensityField) -> Result<()> {
    if p.grid.dim() != 1 {
        return Err(Error::Dimension(format!("one-dimensional density expected, got dim {}", p.grid.dim())));
    }
    Ok(())
}

impl Quantile {
    pub fn new(p: &DensityField) -> Result<Self> {
        require_1d(p)?;
        let mass = p.mass();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::Input(format!("density has mass {mass}, expected 1")));
        }
        let g = &p.grid;
        let n = g.n_cells(0);
        let dx = g.dx(0);
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        cum.push(0.0);
        // compensated running sum keeps cum[n] within a few ulps of the mass
        let mut comp = 0.0;
        for &v in &p.values {
            let y = v * dx / mass - comp;
            let t = acc + y;
            comp = (t - acc) - y;
            acc = t;
            cum.push(acc);
        }
        cum[n] = 1.0;
        for k in 1..n {
            cum[k] = cum[k].min(1.0);
        }
        let faces = (0..=n).map(|k| g.face_axis(0, k)).collect();
        Ok(Self { cum, faces })
    }

    /// `F(x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        let n = self.faces.len() - 1;
        if x <= self.faces[0] {
            return 0.0;
        }
        if x >= self.faces[n] {
            return 1.0;
        }
        let k = (self.faces.partition_point(|f| *f <= x) - 1).min(n - 1);
        let w = (x - self.faces[k]) / (self.faces[k + 1] - self.faces[k]);
        self.cum[k] + w * (self.cum[k + 1] - self.cum[k])
    }

    /// `Q(s)`, the left-continuous generalized inverse of `F`.
    pub fn quantile(&self, s: f64) -> f64 {
        let n = self.cum.len() - 1;
        if s <= 0.0 {
            // first face carrying mass
            let k = self.cum.iter().position(|c| *c > 0.0).unwrap_or(1);
            return self.faces[k - 1];
        }
        if s >= 1.0 {
            let k = self.cum.iter().position(|c| *c >= 1.0).unwrap_or(n);
            return self.faces[k];
        }
        let k = (self.cum.partition_point(|c| *c < s)).clamp(1, n);
        let (c0, c1) = (self.cum[k - 1], self.cum[k]);
        let w = if c1 > c0 { (s - c0) / (c1 - c0) } else { 1.0 };
        self.faces[k - 1] + w * (self.faces[k] - self.faces[k - 1])
    }

    /// Pieces `(s₀, s₁, x₀, x₁)` on which `Q` is linear; massless cells are skipped.
    fn pieces(&self) -> Vec<(f64, f64, f64, f64)> {
        (0..self.cum.len() - 1)
            .filter(|&k| self.cum[k + 1] > self.cum[k])
            .map(|k| (self.cum[k], self.cum[k + 1], self.faces[k], self.faces[k + 1]))
            .collect()
    }
}

/// Common refinement of two quantile functions: `(s₀, s₁, a₀, a₁, b₀, b₁)`
/// with `Q_μ` going linearly `a₀ → a₁` and `Q_ν` going `b₀ → b₁` on `[s₀, s₁]`.
pub(crate) fn merged_pieces(a: &Quantile, b: &Quantile) -> Vec<[f64; 6]> {
    let (pa, pb) = (a.pieces(), b.pieces());
    let eval = |p: &(f64, f64, f64, f64), s: f64| p.2 + (s - p.0) / (p.1 - p.0) * (p.3 - p.2);
    let mut out = Vec::with_capacity(pa.len() + pb.len());
    let (mut i, mut j) = (0, 0);
    while i < pa.len() && j < pb.len() {
        let lo = pa[i].0.max(pb[j].0);
        let hi = pa[i].1.min(pb[j].1);
        if hi > lo {
            out.push([lo, hi, eval(&pa[i], lo), eval(&pa[i], hi), eval(&pb[j], lo), eval(&pb[j], hi)]);
        }
        if pa[i].1 <= pb[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// `W₂(μ, ν) = (∫₀¹ |Q_μ(s) − Q_ν(s)|² ds)^{1/2}`, integrated exactly on the
/// common refinement of the two piecewise-linear quantile functions. The
/// densities may live on different intervals.
pub fn w2_1d(mu: &DensityField, nu: &DensityField) -> Result<f64> {
    require_1d(mu)?;
    require_1d(nu)?;
    let (a, b) = (Quantile::new(mu)?, Quantile::new(nu)?);
    let terms: Vec<f64> = merged_pieces(&a, &b)
        .iter()
        .map(|[s0, s1, a0, a1, b0, b1]| {
            let (d0, d1) = (a0 - b0, a1 - b1);
            (d0 * d0 + d0 * d1 + d1 * d1) / 3.0 * (s1 - s0)
        })
        .collect();
    Ok(pairwise_sum(&terms).max(0.0).sqrt())
}

/// Monotone rearrangement from `source` to `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan1D {
    pub source: DensityField,
    pub target: DensityField,
    /// `∇ψ(x) = Q_target(F_source(x))` at source cell centres.
    pub map_values: Vec<f64>,
    pub w2: f64,
}

impl TransportPlan1D {
    pub fn new(source: &DensityField, target: &DensityField) -> Result<Self> {
        let (qs, qt) = (Quantile::new(source)?, Quantile::new(target)?);
        let g = &source.grid;
        let map_values: Vec<f64> = (0..g.len()).map(|c| qt.quantile(qs.cdf(g.center_axis(0, c)))).collect();
        if let Some(k) = map_values.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::Contract(format!("transport map decreases between cells {k} and {}", k + 1)));
        }
        for c in 0..g.len() {
            let x = g.center_axis(0, c);
            let gap = (qt.cdf(map_values[c]) - qs.cdf(x)).abs();
            if gap > 1e-6 {
                return Err(Error::Contract(format!("pushforward mismatch {gap:e} at x = {x}")));
            }
        }
        Ok(Self { source: source.clone(), target: target.clone(), map_values, w2: w2_1d(source, target)? })
    }

    /// `∇ψ(x)` at an arbitrary point.
    pub fn map_at(&self, x: f64) -> Result<f64> {
        let qs = Quantile::new(&self.source)?;
        let qt = Quantile::new(&self.target)?;
        Ok(qt.quantile(qs.cdf(x)))
    }

    /// Grid spanning both supports at the finer of the two resolutions.
    pub fn hull_grid(&self) -> Result<Grid> {
        let (s, t) = (&self.source.grid, &self.target.grid);
        if s == t {
            return Ok(s.clone());
        }
        let lo = s.lo(0).min(t.lo(0));
        let hi = s.hi(0).max(t.hi(0));
        let dx = s.dx(0).min(t.dx(0));
        Grid::interval(lo, hi, ((hi - lo) / dx).round() as usize)
    }
}

/// Pushforward of the source under `(1−t)Id + t∇ψ` on the plan's hull grid.
pub fn displacement_interpolation(plan: &TransportPlan1D, t: f64) -> Result<DensityField> {
    displacement_interpolation_on(plan, t, &plan.hull_grid()?)
}

/// As [`displacement_interpolation`], with cell masses computed exactly on `grid`.
pub fn displacement_interpolation_on(plan: &TransportPlan1D, t: f64, grid: &Grid) -> Result<DensityField> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("interpolation parameter {t} outside [0, 1]")));
    }
    if grid.dim() != 1 {
        return Err(Error::Dimension("interpolation grid must be one-dimensional".into()));
    }
    let (qs, qt) = (Quantile::new(&plan.source)?, Quantile::new(&plan.target)?);
    // Q_t is linear on each merged piece, going from y0 to y1 while s goes s0 → s1
    let pieces: Vec<(f64, f64, f64, f64)> = merged_pieces(&qs, &qt)
        .iter()
        .map(|[s0, s1, a0, a1, b0, b1]| (*s0, *s1, (1.0 - t) * a0 + t * b0, (1.0 - t) * a1 + t * b1))
        .collect();
    let cdf_t = |y: f64| -> f64 {
        let k = pieces.partition_point(|p| p.3 <= y);
        if k == pieces.len() {
            return 1.0;
        }
        let (s0, s1, y0, y1) = pieces[k];
        if y <= y0 {
            s0
        } else {
            s0 + (y - y0) / (y1 - y0) * (s1 - s0)
        }
    };
    let n = grid.n_cells(0);
    let cum: Vec<f64> = (0..=n).map(|k| cdf_t(grid.face_axis(0, k))).collect();
    let dx = grid.dx(0);
    let values = (0..n).map(|k| (cum[k + 1] - cum[k]).max(0.0) / dx).collect();
    let time = (1.0 - t) * plan.source.time + t * plan.target.time;
    DensityField::new(grid.clone(), values, time)
}
