//! Uniform cell-centred grids on an interval or an axis-aligned rectangle,
//! Neumann (no-flux) difference operators, midpoint quadrature and
//! interpolation.
//!
//! Cells are stored flat with axis 0 running fastest. Boundary faces carry
//! zero flux, which is how the no-flux condition enters every operator.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the closed domain. The second coordinate is ignored in 1-D.
pub type Point = [f64; 2];

pub const MIN_CELLS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridMeta", into = "GridMeta")]
pub struct Grid {
    dim: usize,
    lo: [f64; 2],
    hi: [f64; 2],
    n: [usize; 2],
}

/// Wire form of [`Grid`]: `{ "dim": 1, "extent": [[0, 1]], "n_cells": [200] }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMeta {
    pub dim: usize,
    pub extent: Vec<[f64; 2]>,
    pub n_cells: Vec<usize>,
}

impl TryFrom<GridMeta> for Grid {
    type Error = Error;

    fn try_from(meta: GridMeta) -> Result<Self> {
        if meta.extent.len() != meta.dim || meta.n_cells.len() != meta.dim {
            return Err(Error::Input(format!(
                "grid of dim {} needs {} extents and cell counts, got {} and {}",
                meta.dim,
                meta.dim,
                meta.extent.len(),
                meta.n_cells.len()
            )));
        }
        match meta.dim {
            1 => Grid::interval(meta.extent[0][0], meta.extent[0][1], meta.n_cells[0]),
            2 => Grid::rectangle(meta.extent[0], meta.extent[1], [meta.n_cells[0], meta.n_cells[1]]),
            d => Err(Error::Dimension(format!("only 1-D and 2-D grids are supported, got {d}"))),
        }
    }
}

impl From<Grid> for GridMeta {
    fn from(g: Grid) -> Self {
        let axes = 0..g.dim;
        GridMeta {
            dim: g.dim,
            extent: axes.clone().map(|a| [g.lo[a], g.hi[a]]).collect(),
            n_cells: axes.map(|a| g.n[a]).collect(),
        }
    }
}

fn check_axis(lo: f64, hi: f64, n: usize) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::Input(format!("axis extent [{lo}, {hi}] must satisfy hi > lo")));
    }
    if n < MIN_CELLS {
        return Err(Error::Input(format!("at least {MIN_CELLS} cells per axis required, got {n}")));
    }
    Ok(())
}

/// Order-fixed pairwise summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 32 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

impl Grid {
    pub fn interval(lo: f64, hi: f64, n: usize) -> Result<Self> {
        check_axis(lo, hi, n)?;
        Ok(Self { dim: 1, lo: [lo, 0.0], hi: [hi, 1.0], n: [n, 1] })
    }

    pub fn rectangle(x: [f64; 2], y: [f64; 2], n: [usize; 2]) -> Result<Self> {
        check_axis(x[0], x[1], n[0])?;
        check_axis(y[0], y[1], n[1])?;
        Ok(Self { dim: 2, lo: [x[0], y[0]], hi: [x[1], y[1]], n })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Total number of cells.
    pub fn len(&self) -> usize {
        self.n[0] * self.n[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_cells(&self, axis: usize) -> usize {
        self.n[axis]
    }

    pub fn lo(&self, axis: usize) -> f64 {
        self.lo[axis]
    }

    pub fn hi(&self, axis: usize) -> f64 {
        self.hi[axis]
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn dx(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / self.n[axis] as f64
    }

    pub fn min_dx(&self) -> f64 {
        (0..self.dim).map(|a| self.dx(a)).fold(f64::INFINITY, f64::min)
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.dx(a)).product()
    }

    pub fn domain_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.width(a)).product()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.n[0] * j
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.n[0], idx / self.n[0])
    }

    #[inline]
    pub fn center_axis(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + (i as f64 + 0.5) * self.dx(axis)
    }

    /// Position of face `k` (0..=n) along `axis`.
    #[inline]
    pub fn face_axis(&self, axis: usize, k: usize) -> f64 {
        if k == self.n[axis] {
            self.hi[axis]
        } else {
            self.lo[axis] + k as f64 * self.dx(axis)
        }
    }

    pub fn center(&self, idx: usize) -> Point {
        let (i, j) = self.coords(idx);
        if self.dim == 1 {
            [self.center_axis(0, i), 0.0]
        } else {
            [self.center_axis(0, i), self.center_axis(1, j)]
        }
    }

    pub fn centers(&self) -> Vec<Point> {
        (0..self.len()).map(|c| self.center(c)).collect()
    }

    pub fn contains(&self, x: Point) -> bool {
        (0..self.dim).all(|a| x[a] >= self.lo[a] && x[a] <= self.hi[a])
    }

    /// Points spread along every boundary edge (both endpoints in 1-D).
    pub fn boundary_samples(&self, per_edge: usize) -> Vec<Point> {
        if self.dim == 1 {
            return vec![[self.lo[0], 0.0], [self.hi[0], 0.0]];
        }
        let per_edge = per_edge.max(2);
        let mut out = Vec::with_capacity(4 * per_edge);
        for k in 0..per_edge {
            let s = k as f64 / (per_edge - 1) as f64;
            let x = self.lo[0] + s * self.width(0);
            let y = self.lo[1] + s * self.width(1);
            out.push([x, self.lo[1]]);
            out.push([x, self.hi[1]]);
            out.push([self.lo[0], y]);
            out.push([self.hi[0], y]);
        }
        out
    }

    fn check_len(&self, values: &[f64]) {
        assert_eq!(values.len(), self.len(), "field length does not match grid");
    }

    /// Midpoint quadrature `Σ values · cell volume`.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.check_len(values);
        pairwise_sum(values) * self.cell_volume()
    }

    /// Per-cell gradient. Centred differences in the interior; at boundary
    /// cells the ghost value mirrors the interior neighbour, so the normal
    /// component vanishes there.
    pub fn gradient(&self, values: &[f64]) -> Vec<[f64; 2]> {
        self.check_len(values);
        let mut out = vec![[0.0; 2]; self.len()];
        for axis in 0..self.dim {
            let n = self.n[axis];
            let inv = 0.5 / self.dx(axis);
            for (c, g) in out.iter_mut().enumerate() {
                let (i, j) = self.coords(c);
                let k = if axis == 0 { i } else { j };
                if k == 0 || k == n - 1 {
                    continue;
                }
                let (lo, hi) = if axis == 0 {
                    (self.index(i - 1, j), self.index(i + 1, j))
                } else {
                    (self.index(i, j - 1), self.index(i, j + 1))
                };
                g[axis] = (values[hi] - values[lo]) * inv;
            }
        }
        out
    }

    /// Number of faces normal to `axis`.
    pub fn n_faces(&self, axis: usize) -> usize {
        if axis == 0 {
            (self.n[0] + 1) * self.n[1]
        } else {
            self.n[0] * (self.n[1] + 1)
        }
    }

    #[inline]
    pub fn face_index(&self, axis: usize, i: usize, j: usize) -> usize {
        if axis == 0 {
            i + (self.n[0] + 1) * j
        } else {
            i + self.n[0] * j
        }
    }

    /// Calls `visit(face, left_cell, right_cell)` for every interior face
    /// normal to `axis`.
    #[inline]
    pub fn for_each_interior_face(&self, axis: usize, mut visit: impl FnMut(usize, usize, usize)) {
        let (n0, n1) = (self.n[0], self.n[1]);
        if axis == 0 {
            for j in 0..n1 {
                for k in 1..n0 {
                    visit(self.face_index(0, k, j), self.index(k - 1, j), self.index(k, j));
                }
            }
        } else {
            for k in 1..n1 {
                for i in 0..n0 {
                    visit(self.face_index(1, i, k), self.index(i, k - 1), self.index(i, k));
                }
            }
        }
    }

    /// Position of a face centre.
    pub fn face_center(&self, axis: usize, face: usize) -> Point {
        let stride = if axis == 0 { self.n[0] + 1 } else { self.n[0] };
        let (i, j) = (face % stride, face / stride);
        if axis == 0 {
            [self.face_axis(0, i), if self.dim == 2 { self.center_axis(1, j) } else { 0.0 }]
        } else {
            [self.center_axis(0, i), self.face_axis(1, j)]
        }
    }

    /// Normal derivative on every face normal to `axis`; zero on boundary faces.
    pub fn face_gradient(&self, values: &[f64], axis: usize) -> Vec<f64> {
        self.check_len(values);
        let inv = 1.0 / self.dx(axis);
        let mut out = vec![0.0; self.n_faces(axis)];
        self.for_each_interior_face(axis, |f, l, r| out[f] = (values[r] - values[l]) * inv);
        out
    }

    /// Flux divergence `Σ_axis (F_{k+½} − F_{k−½}) / Δx`.
    pub fn divergence_faces(&self, fluxes: &[Vec<f64>]) -> Vec<f64> {
        assert_eq!(fluxes.len(), self.dim, "one flux array per axis expected");
        let mut out = vec![0.0; self.len()];
        for (axis, flux) in fluxes.iter().enumerate() {
            assert_eq!(flux.len(), self.n_faces(axis), "flux length does not match faces");
            let inv = 1.0 / self.dx(axis);
            for (c, o) in out.iter_mut().enumerate() {
                let (i, j) = self.coords(c);
                let (lo, hi) = if axis == 0 {
                    (self.face_index(0, i, j), self.face_index(0, i + 1, j))
                } else {
                    (self.face_index(1, i, j), self.face_index(1, i, j + 1))
                };
                *o += (flux[hi] - flux[lo]) * inv;
            }
        }
        out
    }

    /// Conservative Laplacian with zero boundary flux.
    pub fn laplacian(&self, values: &[f64]) -> Vec<f64> {
        self.check_len(values);
        let mut out = vec![0.0; self.len()];
        for axis in 0..self.dim {
            let inv2 = 1.0 / (self.dx(axis) * self.dx(axis));
            self.for_each_interior_face(axis, |_, l, r| {
                let d = (values[r] - values[l]) * inv2;
                out[l] += d;
                out[r] -= d;
            });
        }
        out
    }

    /// `div(a ∇b)` with arithmetic-mean face coefficients and zero boundary flux.
    pub fn div_a_grad_b(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        self.check_len(a);
        self.check_len(b);
        let fluxes: Vec<Vec<f64>> = (0..self.dim)
            .map(|axis| {
                let mut g = self.face_gradient(b, axis);
                self.for_each_interior_face(axis, |f, l, r| g[f] *= 0.5 * (a[l] + a[r]));
                g
            })
            .collect();
        self.divergence_faces(&fluxes)
    }

    #[inline]
    fn axis_weights(&self, axis: usize, x: f64) -> (usize, f64) {
        let n = self.n[axis];
        let s = ((x - self.lo[axis]) / self.dx(axis) - 0.5).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n - 2);
        (i, s - i as f64)
    }

    /// Multilinear interpolation of cell-centre values, constant in the
    /// half-cell band next to the boundary. Does not check the domain.
    #[inline]
    pub fn interpolate_unchecked(&self, values: &[f64], x: Point) -> f64 {
        let (i, wx) = self.axis_weights(0, x[0]);
        if self.dim == 1 {
            return (1.0 - wx) * values[i] + wx * values[i + 1];
        }
        let (j, wy) = self.axis_weights(1, x[1]);
        let c00 = values[self.index(i, j)];
        let c10 = values[self.index(i + 1, j)];
        let c01 = values[self.index(i, j + 1)];
        let c11 = values[self.index(i + 1, j + 1)];
        (1.0 - wy) * ((1.0 - wx) * c00 + wx * c10) + wy * ((1.0 - wx) * c01 + wx * c11)
    }

    pub fn interpolate(&self, values: &[f64], x: Point) -> Result<f64> {
        self.check_len(values);
        if !self.contains(x) {
            return Err(Error::Domain(format!("point {x:?} lies outside the closed domain")));
        }
        Ok(self.interpolate_unchecked(values, x))
    }

    /// Cell containing `x` (clamped to the grid).
    pub fn locate(&self, x: Point) -> usize {
        let cell = |axis: usize| {
            let s = ((x[axis] - self.lo[axis]) / self.dx(axis)).floor();
            (s.max(0.0) as usize).min(self.n[axis] - 1)
        };
        if self.dim == 1 {
            cell(0)
        } else {
            self.index(cell(0), cell(1))
        }
    }
}

/// A density sampled at cell centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityField {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub time: f64,
}

impl DensityField {
    pub fn new(grid: Grid, values: Vec<f64>, time: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Input(format!("{} values for a grid of {} cells", values.len(), grid.len())));
        }
        if let Some((c, v)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Input(format!("density value {v} in cell {c} is negative or not finite")));
        }
        Ok(Self { grid, values, time })
    }

    /// Samples `density` at cell centres.
    pub fn from_fn(grid: Grid, density: impl Fn(Point) -> f64, time: f64) -> Result<Self> {
        let values = (0..grid.len()).map(|c| density(grid.center(c))).collect();
        Self::new(grid, values, time)
    }

    /// Uniform probability density on the grid's domain.
    pub fn uniform(grid: Grid) -> Self {
        let v = 1.0 / grid.domain_volume();
        let values = vec![v; grid.len()];
        Self { grid, values, time: 0.0 }
    }

    pub fn mass(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    /// Rescales to unit mass.
    pub fn normalized(mut self) -> Result<Self> {
        let mass = self.mass();
        if !(mass > 0.0) {
            return Err(Error::Input(format!("cannot normalize a field of mass {mass}")));
        }
        self.values.iter_mut().for_each(|v| *v /= mass);
        Ok(self)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn gradient(&self) -> Vec<[f64; 2]> {
        self.grid.gradient(&self.values)
    }

    pub fn interpolate(&self, x: Point) -> Result<f64> {
        self.grid.interpolate(&self.values, x)
    }

    pub fn l1_distance(&self, other: &DensityField) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::Input("L¹ distance needs matching grids".into()));
        }
        let diff: Vec<f64> = self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).collect();
        Ok(self.grid.integrate(&diff))
    }

    /// CSV with columns `x[,y],value`, one row per cell.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.grid.dim() == 1 {
            w.write_record(["x", "value"])?;
        } else {
            w.write_record(["x", "y", "value"])?;
        }
        for (c, v) in self.values.iter().enumerate() {
            let p = self.grid.center(c);
            if self.grid.dim() == 1 {
                w.write_record(&[p[0].to_string(), v.to_string()])?;
            } else {
                w.write_record(&[p[0].to_string(), p[1].to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the `value` column of a CSV written by [`Self::write_csv`]
    /// (or any CSV with a trailing value column in cell order).
    pub fn read_csv<R: Read>(grid: Grid, input: R, time: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut values = Vec::with_capacity(grid.len());
        for rec in r.records() {
            let rec = rec?;
            let last = rec.get(rec.len().saturating_sub(1)).unwrap_or("");
            let v: f64 = last
                .trim()
                .parse()
                .map_err(|_| Error::Input(format!("unparseable density value {last:?}")))?;
            values.push(v);
        }
        Self::new(grid, values, time)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: DensityField = serde_json::from_str(s)?;
        Self::new(f.grid, f.values, f.time)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn cosine(n: usize) -> DensityField {
        let g = Grid::interval(0.0, 1.0, n).unwrap();
        DensityField::from_fn(g, |x| 1.0 + 0.5 * (PI * x[0]).cos(), 0.0).unwrap()
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(Grid::interval(1.0, 1.0, 10).is_err());
        assert!(Grid::interval(0.0, 1.0, 3).is_err());
        assert!(Grid::rectangle([0.0, 1.0], [0.0, -1.0], [8, 8]).is_err());
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let g = Grid::rectangle([0.0, 2.0], [0.0, 1.0], [8, 6]).unwrap();
        let grad = g.gradient(&vec![3.0; g.len()]);
        assert!(grad.iter().all(|v| v[0] == 0.0 && v[1] == 0.0));
    }

    #[test]
    fn gradient_matches_cosine_derivative() {
        let f = cosine(400);
        let grad = f.gradient();
        // x = 0.5 sits on the face between cells 199 and 200
        let mid = 0.5 * (grad[199][0] + grad[200][0]);
        assert!((mid + 0.5 * PI).abs() < 1e-3, "{mid}");
        assert_eq!(grad[0][0], 0.0);
        assert_eq!(grad[399][0], 0.0);
    }

    #[test]
    fn integrate_examples() {
        let g = Grid::interval(0.0, 1.0, 10).unwrap();
        assert!((g.integrate(&[1.0; 10]) - 1.0).abs() < 1e-15);
        assert!((cosine(400).mass() - 1.0).abs() < 1e-10);
        let r = Grid::rectangle([0.0, 2.0], [0.0, 1.0], [10, 5]).unwrap();
        assert!((r.integrate(&vec![0.5; 50]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn interpolate_examples() {
        let f = cosine(400);
        let v = f.interpolate([0.25, 0.0]).unwrap();
        assert!((v - (1.0 + 0.5 * (PI / 4.0).cos())).abs() < 1e-4);
        assert!(f.interpolate([1.01, 0.0]).is_err());
        let g = Grid::interval(0.0, 1.0, 10).unwrap();
        let lin: Vec<f64> = (0..10).map(|c| 2.0 * g.center(c)[0] + 1.0).collect();
        for c in 0..10 {
            assert!((g.interpolate(&lin, g.center(c)).unwrap() - lin[c]).abs() < 1e-14);
        }
        // constant extrapolation in the half-cell band
        assert_eq!(g.interpolate(&lin, [0.0, 0.0]).unwrap(), lin[0]);
        assert_eq!(g.interpolate(&lin, [1.0, 0.0]).unwrap(), lin[9]);
    }

    #[test]
    fn interpolate_2d_constant_per_axis() {
        let g = Grid::rectangle([0.0, 1.0], [0.0, 2.0], [5, 7]).unwrap();
        let vals: Vec<f64> = (0..g.len()).map(|c| g.coords(c).1 as f64).collect();
        let v = g.interpolate(&vals, [0.33, g.center_axis(1, 3)]).unwrap();
        assert!((v - 3.0).abs() < 1e-14);
    }

    #[test]
    fn laplacian_is_face_divergence_of_face_gradient() {
        let g = Grid::rectangle([0.0, 1.0], [0.0, 1.0], [9, 7]).unwrap();
        let vals: Vec<f64> = g.centers().iter().map(|p| (3.0 * p[0]).sin() * (2.0 * p[1]).cos()).collect();
        let lap = g.laplacian(&vals);
        let faces: Vec<Vec<f64>> = (0..2).map(|a| g.face_gradient(&vals, a)).collect();
        let div = g.divergence_faces(&faces);
        for (a, b) in lap.iter().zip(&div) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn json_and_csv_round_trip() {
        let f = cosine(16);
        let back = DensityField::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(back, f);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x,value\n"));
        let back = DensityField::read_csv(f.grid.clone(), buf.as_slice(), 0.0).unwrap();
        assert_eq!(back.values, f.values);
    }

    #[test]
    fn grid_meta_rejects_mismatch() {
        let bad = r#"{"dim": 2, "extent": [[0, 1]], "n_cells": [10]}"#;
        assert!(serde_json::from_str::<Grid>(bad).is_err());
    }
}
