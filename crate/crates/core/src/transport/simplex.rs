//! Exact discrete optimal transport by the transportation (network) simplex
//! method on a spanning-tree basis.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::grid::Point;

const WEIGHT_TOL: f64 = 1e-9;
pub const MAX_SUPPORT: usize = 10_000;

/// Dense row-major cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Input(format!("cost matrix needs {} entries, got {}", rows * cols, data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    /// `|xᵢ − yⱼ|²`.
    pub fn squared_euclidean(xs: &[Point], ys: &[Point]) -> Self {
        let data = xs.iter().flat_map(|x| ys.iter().map(move |y| sq_dist(*x, *y))).collect();
        Self { rows: xs.len(), cols: ys.len(), data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

#[inline]
fn sq_dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// An optimal plan: total cost and the nonzero flows `(i, j, mass)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportSolution {
    pub cost: f64,
    pub flows: Vec<(usize, usize, f64)>,
    pub iterations: usize,
}

fn validate(w: &[f64], name: &str) -> Result<()> {
    if w.is_empty() {
        return Err(Error::Input(format!("{name} has no support points")));
    }
    if w.len() > MAX_SUPPORT {
        return Err(Error::Input(format!("{name} has {} support points, limit is {MAX_SUPPORT}", w.len())));
    }
    if let Some(v) = w.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Input(format!("{name} contains the invalid weight {v}")));
    }
    let total: f64 = crate::grid::pairwise_sum(w);
    if (total - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::Input(format!("{name} weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// Minimises `Σ πᵢⱼ cost(i, j)` over couplings of `a` and `b`.
pub fn solve_transport(a: &[f64], b: &[f64], cost: impl Fn(usize, usize) -> f64) -> Result<TransportSolution> {
    validate(a, "source")?;
    validate(b, "target")?;
    // massless points never carry flow
    let rows: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0).collect();
    let cols: Vec<usize> = (0..b.len()).filter(|&j| b[j] > 0.0).collect();
    let sa: Vec<f64> = rows.iter().map(|&i| a[i]).collect();
    let sb: Vec<f64> = cols.iter().map(|&j| b[j]).collect();
    let mut sb_scaled = sb.clone();
    // put both sides on exactly the same total
    let (ta, tb) = (crate::grid::pairwise_sum(&sa), crate::grid::pairwise_sum(&sb));
    sb_scaled.iter_mut().for_each(|v| *v *= ta / tb);
    let sub = Simplex::new(&sa, &sb_scaled, |i, j| cost(rows[i], cols[j]))?.run()?;
    let flows = sub.flows.into_iter().map(|(i, j, x)| (rows[i], cols[j], x)).collect();
    Ok(TransportSolution { cost: sub.cost, flows, iterations: sub.iterations })
}

/// `W₂` between two weighted point sets given their cost matrix.
pub fn w2_discrete(mu: &[f64], nu: &[f64], cost: &CostMatrix) -> Result<f64> {
    if cost.rows != mu.len() || cost.cols != nu.len() {
        return Err(Error::Input(format!(
            "cost matrix is {}×{} but weights have lengths {} and {}",
            cost.rows,
            cost.cols,
            mu.len(),
            nu.len()
        )));
    }
    Ok(solve_transport(mu, nu, |i, j| cost.get(i, j))?.cost.max(0.0).sqrt())
}

/// `W₂` between weighted point clouds with squared Euclidean cost; costs are
/// computed on the fly so large supports need no dense matrix.
pub fn w2_points(xs: &[Point], mu: &[f64], ys: &[Point], nu: &[f64]) -> Result<f64> {
    if xs.len() != mu.len() || ys.len() != nu.len() {
        return Err(Error::Input("points and weights differ in length".into()));
    }
    Ok(solve_transport(mu, nu, |i, j| sq_dist(xs[i], ys[j]))?.cost.max(0.0).sqrt())
}

struct Simplex<C> {
    m: usize,
    n: usize,
    cost: C,
    /// Basic cells `(i, j, flow)`; always `m + n − 1` of them.
    basis: Vec<(usize, usize, f64)>,
    /// Basic cell ids per row and per column.
    row_adj: Vec<Vec<usize>>,
    col_adj: Vec<Vec<usize>>,
    u: Vec<f64>,
    v: Vec<f64>,
    scale: f64,
}

impl<C: Fn(usize, usize) -> f64> Simplex<C> {
    fn new(a: &[f64], b: &[f64], cost: C) -> Result<Self> {
        let (m, n) = (a.len(), b.len());
        let (mut ra, mut rb) = (a.to_vec(), b.to_vec());
        let mut basis = Vec::with_capacity(m + n - 1);
        let (mut i, mut j) = (0, 0);
        // north-west corner rule
        loop {
            let x = ra[i].min(rb[j]);
            basis.push((i, j, x));
            ra[i] -= x;
            rb[j] -= x;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if j == n - 1 || (i < m - 1 && ra[i] <= rb[j]) {
                i += 1;
            } else {
                j += 1;
            }
        }
        let mut scale: f64 = 0.0;
        for i in 0..m.min(64) {
            for j in 0..n.min(64) {
                scale = scale.max(cost(i, j).abs());
            }
        }
        let mut s = Self {
            m,
            n,
            cost,
            basis,
            row_adj: vec![vec![]; m],
            col_adj: vec![vec![]; n],
            u: vec![0.0; m],
            v: vec![0.0; n],
            scale: scale.max(1e-300),
        };
        s.rebuild_adjacency();
        Ok(s)
    }

    fn rebuild_adjacency(&mut self) {
        self.row_adj.iter_mut().for_each(Vec::clear);
        self.col_adj.iter_mut().for_each(Vec::clear);
        for (k, &(i, j, _)) in self.basis.iter().enumerate() {
            self.row_adj[i].push(k);
            self.col_adj[j].push(k);
        }
    }

    /// Solves `uᵢ + vⱼ = cᵢⱼ` on the basis tree with `u₀ = 0`.
    fn potentials(&mut self) -> Result<()> {
        let mut seen_r = vec![false; self.m];
        let mut seen_c = vec![false; self.n];
        let mut queue = VecDeque::new();
        self.u[0] = 0.0;
        seen_r[0] = true;
        queue.push_back((true, 0));
        let mut visited = 1;
        while let Some((is_row, idx)) = queue.pop_front() {
            let adj = if is_row { &self.row_adj[idx] } else { &self.col_adj[idx] };
            for &k in adj {
                let (i, j, _) = self.basis[k];
                if is_row && !seen_c[j] {
                    self.v[j] = (self.cost)(i, j) - self.u[i];
                    seen_c[j] = true;
                    queue.push_back((false, j));
                    visited += 1;
                } else if !is_row && !seen_r[i] {
                    self.u[i] = (self.cost)(i, j) - self.v[j];
                    seen_r[i] = true;
                    queue.push_back((true, i));
                    visited += 1;
                }
            }
        }
        if visited != self.m + self.n {
            return Err(Error::Solver("basis is not a spanning tree".into()));
        }
        Ok(())
    }

    /// Entering cell by block pricing, cycling through the rows.
    fn entering(&self, start_row: usize) -> Option<(usize, usize)> {
        let tol = -1e-12 * self.scale;
        let block = ((self.m * self.n) as f64).sqrt().ceil() as usize;
        let mut best: Option<(f64, usize, usize)> = None;
        let mut scanned = 0;
        for r in 0..self.m {
            let i = (start_row + r) % self.m;
            for j in 0..self.n {
                let red = (self.cost)(i, j) - self.u[i] - self.v[j];
                if red < tol && best.is_none_or(|b| red < b.0) {
                    best = Some((red, i, j));
                }
            }
            scanned += self.n;
            if best.is_some() && scanned >= block {
                break;
            }
        }
        best.map(|b| (b.1, b.2))
    }

    /// Basic cells on the tree path from row `i` to column `j`, in order.
    fn path(&self, i: usize, j: usize) -> Result<Vec<usize>> {
        // parent edge for rows (index 0..m) and columns (m..m+n)
        let mut parent: Vec<Option<usize>> = vec![None; self.m + self.n];
        let mut seen = vec![false; self.m + self.n];
        let mut queue = VecDeque::new();
        seen[i] = true;
        queue.push_back(i);
        while let Some(node) = queue.pop_front() {
            if node == self.m + j {
                break;
            }
            let adj = if node < self.m { &self.row_adj[node] } else { &self.col_adj[node - self.m] };
            for &k in adj {
                let (r, c, _) = self.basis[k];
                let next = if node < self.m { self.m + c } else { r };
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = Some(k);
                    queue.push_back(next);
                }
            }
        }
        let mut out = Vec::new();
        let mut node = self.m + j;
        while node != i {
            let k = parent[node].ok_or_else(|| Error::Solver("no tree path for entering cell".into()))?;
            out.push(k);
            let (r, c, _) = self.basis[k];
            node = if node < self.m { self.m + c } else { r };
        }
        out.reverse();
        Ok(out)
    }

    fn run(mut self) -> Result<TransportSolution> {
        let cap = 50 * (self.m + self.n) * (self.m + self.n).max(10);
        let mut start = 0;
        let mut iterations = 0;
        loop {
            self.potentials()?;
            let Some((ei, ej)) = self.entering(start) else { break };
            start = (ei + 1) % self.m;
            iterations += 1;
            if iterations > cap {
                return Err(Error::Solver(format!("transport simplex did not converge in {cap} iterations")));
            }
            // path from row ei to column ej; cells alternate −, +, −, ...
            let path = self.path(ei, ej)?;
            let (mut theta, mut leave) = (f64::INFINITY, usize::MAX);
            for (pos, &k) in path.iter().enumerate() {
                if pos % 2 == 0 && self.basis[k].2 < theta {
                    theta = self.basis[k].2;
                    leave = k;
                }
            }
            for (pos, &k) in path.iter().enumerate() {
                if pos % 2 == 0 {
                    self.basis[k].2 -= theta;
                } else {
                    self.basis[k].2 += theta;
                }
            }
            self.basis[leave] = (ei, ej, theta);
            self.rebuild_adjacency();
        }
        let flows: Vec<(usize, usize, f64)> = self.basis.iter().copied().filter(|f| f.2 > 0.0).collect();
        let terms: Vec<f64> = flows.iter().map(|&(i, j, x)| x * (self.cost)(i, j)).collect();
        Ok(TransportSolution { cost: crate::grid::pairwise_sum(&terms), flows, iterations })
    }
}
