//! Reflected Euler–Maruyama particles driven by a solver run, with the
//! trajectorial decomposition `v(t,Xₜ) − v(0,X₀) = Mₜ + Fₜ` accumulated
//! along each path.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropy::{dissipation_field, perturbed_dissipation_field, pressure_field};
use crate::error::{Error, Result};
use crate::grid::{DensityField, Grid, Point};
use crate::nonlinearity::Nonlinearity;
use crate::pde::{PdeRun, PerturbationPotential};
use crate::rng::{ParticleRng, INIT_BASE};

/// Particles simulated sequentially by one worker; fixes the reduction order.
const CHUNK: usize = 64;
const MAX_REJECTIONS: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub x: Point,
    /// Accumulated local time.
    pub l: f64,
    pub seed_id: u64,
    /// Steps taken so far; the next increment must carry this step number.
    pub steps: u64,
}

impl ParticleState {
    pub fn new(x: Point, seed_id: u64) -> Self {
        Self { x, l: 0.0, seed_id, steps: 0 }
    }
}

/// A Brownian increment `ΔW` tagged with the particle and step it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Increment {
    pub particle_id: u64,
    pub step: u64,
    pub dw: [f64; 2],
}

impl Increment {
    pub fn from_rng(rng: &mut ParticleRng, particle_id: u64, step: u64, dt: f64, dim: usize) -> Self {
        let z = rng.normals(step);
        let s = dt.sqrt();
        let dw = if dim == 1 { [s * z[0], 0.0] } else { [s * z[0], s * z[1]] };
        Self { particle_id, step, dw }
    }

    pub fn draw(seed: u64, particle_id: u64, step: u64, dt: f64, dim: usize) -> Self {
        Self::from_rng(&mut ParticleRng::new(seed, particle_id), particle_id, step, dt, dim)
    }

    pub fn negated(self) -> Self {
        Self { dw: [-self.dw[0], -self.dw[1]], ..self }
    }
}

/// Anything that can report a density at a point.
pub trait DensitySampler {
    fn grid(&self) -> &Grid;
    fn density_at(&self, x: Point) -> f64;
}

/// Density plus the pressure gradient and dissipation function at a point.
pub trait FieldSampler: DensitySampler {
    fn grad_pressure_at(&self, x: Point) -> [f64; 2];
    fn dissipation_at(&self, x: Point) -> f64;
}

impl DensitySampler for DensityField {
    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn density_at(&self, x: Point) -> f64 {
        self.grid.interpolate_unchecked(&self.values, x)
    }
}

/// Precomputed `p`, `∇v` and `D` (or `D^β`) for one snapshot.
#[derive(Debug, Clone)]
pub struct SnapshotFields {
    pub grid: Grid,
    pub time: f64,
    pub p: Vec<f64>,
    pub grad_v: [Vec<f64>; 2],
    pub d: Vec<f64>,
}

impl SnapshotFields {
    pub fn new(p: &DensityField, nl: &Nonlinearity, beta: Option<&PerturbationPotential>) -> Result<Self> {
        let v = pressure_field(p, nl)?;
        let g = p.grid.gradient(&v);
        let d = match beta {
            Some(b) => perturbed_dissipation_field(p, nl, b)?,
            None => dissipation_field(p, nl)?,
        };
        Ok(Self {
            grid: p.grid.clone(),
            time: p.time,
            p: p.values.clone(),
            grad_v: [g.iter().map(|g| g[0]).collect(), g.iter().map(|g| g[1]).collect()],
            d,
        })
    }
}

impl DensitySampler for SnapshotFields {
    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn density_at(&self, x: Point) -> f64 {
        self.grid.interpolate_unchecked(&self.p, x)
    }
}

impl FieldSampler for SnapshotFields {
    fn grad_pressure_at(&self, x: Point) -> [f64; 2] {
        let gx = self.grid.interpolate_unchecked(&self.grad_v[0], x);
        let gy = if self.grid.dim() == 2 { self.grid.interpolate_unchecked(&self.grad_v[1], x) } else { 0.0 };
        [gx, gy]
    }

    fn dissipation_at(&self, x: Point) -> f64 {
        self.grid.interpolate_unchecked(&self.d, x)
    }
}

/// Snapshot fields of a whole run, linearly interpolated in time.
#[derive(Debug, Clone)]
pub struct FieldSeries {
    pub frames: Vec<SnapshotFields>,
    pub nl: Nonlinearity,
    pub beta: Option<PerturbationPotential>,
}

impl FieldSeries {
    pub fn from_run(run: &PdeRun) -> Result<Self> {
        let beta = run.perturbation.as_ref();
        let frames = run
            .snapshots
            .par_iter()
            .map(|s| SnapshotFields::new(s, &run.nl, beta))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { frames, nl: run.nl.clone(), beta: run.perturbation.clone() })
    }

    pub fn grid(&self) -> &Grid {
        &self.frames[0].grid
    }

    pub fn t_start(&self) -> f64 {
        self.frames[0].time
    }

    pub fn t_end(&self) -> f64 {
        self.frames[self.frames.len() - 1].time
    }

    /// Frame pair and weight for time `t`, clamped to the run.
    pub fn at(&self, t: f64) -> FrameAt<'_> {
        let n = self.frames.len();
        if n == 1 || t <= self.frames[0].time {
            return FrameAt { series: self, idx: 0, w: 0.0 };
        }
        if t >= self.frames[n - 1].time {
            return FrameAt { series: self, idx: n - 1, w: 0.0 };
        }
        let k = self.frames.partition_point(|f| f.time <= t) - 1;
        let (a, b) = (self.frames[k].time, self.frames[k + 1].time);
        FrameAt { series: self, idx: k, w: (t - a) / (b - a) }
    }

    /// Exact frame lookup for step `k` when each snapshot spans `per` steps.
    fn at_step(&self, k: usize, per: usize) -> FrameAt<'_> {
        let idx = k / per;
        let rem = k % per;
        if rem == 0 || idx + 1 >= self.frames.len() {
            FrameAt { series: self, idx: idx.min(self.frames.len() - 1), w: 0.0 }
        } else {
            FrameAt { series: self, idx, w: rem as f64 / per as f64 }
        }
    }
}

/// View of a [`FieldSeries`] at one time.
#[derive(Clone, Copy)]
pub struct FrameAt<'a> {
    series: &'a FieldSeries,
    idx: usize,
    w: f64,
}

impl FrameAt<'_> {
    #[inline]
    fn blend(&self, pick: impl Fn(&SnapshotFields) -> f64) -> f64 {
        let a = pick(&self.series.frames[self.idx]);
        if self.w == 0.0 {
            a
        } else {
            (1.0 - self.w) * a + self.w * pick(&self.series.frames[self.idx + 1])
        }
    }
}

impl DensitySampler for FrameAt<'_> {
    fn grid(&self) -> &Grid {
        self.series.grid()
    }

    fn density_at(&self, x: Point) -> f64 {
        self.blend(|f| f.density_at(x))
    }
}

impl FieldSampler for FrameAt<'_> {
    fn grad_pressure_at(&self, x: Point) -> [f64; 2] {
        let gx = self.blend(|f| f.grad_pressure_at(x)[0]);
        let gy = if self.grid().dim() == 2 { self.blend(|f| f.grad_pressure_at(x)[1]) } else { 0.0 };
        [gx, gy]
    }

    fn dissipation_at(&self, x: Point) -> f64 {
        self.blend(|f| f.dissipation_at(x))
    }
}

/// Mirror-folds `y` into the box axis by axis; returns the folded point and
/// the total folded distance.
pub fn reflect(grid: &Grid, mut y: Point) -> Result<(Point, f64)> {
    let mut dl = 0.0;
    for axis in 0..grid.dim() {
        let (lo, hi) = (grid.lo(axis), grid.hi(axis));
        let v = y[axis];
        let folded = if v < lo {
            dl += lo - v;
            2.0 * lo - v
        } else if v > hi {
            dl += v - hi;
            2.0 * hi - v
        } else {
            v
        };
        if !(lo..=hi).contains(&folded) {
            return Err(Error::StepSize(format!(
                "proposal {v} lies more than one domain width outside [{lo}, {hi}]; reduce dt"
            )));
        }
        y[axis] = folded;
    }
    Ok((y, dl))
}

fn check_increment(state: &ParticleState, inc: &Increment, dt: f64) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::Input(format!("dt must be positive, got {dt}")));
    }
    if !(inc.dw[0].is_finite() && inc.dw[1].is_finite()) {
        return Err(Error::Input("non-finite Gaussian increment".into()));
    }
    if inc.particle_id != state.seed_id || inc.step != state.steps {
        return Err(Error::Contract(format!(
            "increment for particle {} step {} applied to particle {} at step {}",
            inc.particle_id, inc.step, state.seed_id, state.steps
        )));
    }
    Ok(())
}

fn sigma_at(p: &impl DensitySampler, nl: &Nonlinearity, x: Point) -> Result<f64> {
    let u = p.density_at(x);
    if !(u > 0.0) {
        return Err(Error::Domain(format!("density {u} at {x:?} is not positive")));
    }
    nl.diffusion_coeff(u)
}

fn finish(state: &ParticleState, p: &impl DensitySampler, proposal: Point) -> Result<ParticleState> {
    let (x, dl) = reflect(p.grid(), proposal)?;
    Ok(ParticleState { x, l: state.l + dl, seed_id: state.seed_id, steps: state.steps + 1 })
}

/// `X′ = X + σ(p(X))ΔW`, reflected into the domain.
pub fn em_step_reflected(
    state: &ParticleState,
    p: &impl DensitySampler,
    nl: &Nonlinearity,
    dt: f64,
    inc: &Increment,
) -> Result<ParticleState> {
    check_increment(state, inc, dt)?;
    let s = sigma_at(p, nl, state.x)?;
    let proposal = [state.x[0] + s * inc.dw[0], state.x[1] + s * inc.dw[1]];
    finish(state, p, proposal)
}

/// As [`em_step_reflected`] with the extra drift `−∇β(X) dt`.
pub fn em_step_perturbed(
    state: &ParticleState,
    p: &impl DensitySampler,
    nl: &Nonlinearity,
    beta: &PerturbationPotential,
    dt: f64,
    inc: &Increment,
) -> Result<ParticleState> {
    check_increment(state, inc, dt)?;
    let s = sigma_at(p, nl, state.x)?;
    let g = beta.gradient(state.x);
    let proposal = [state.x[0] + s * inc.dw[0] - g[0] * dt, state.x[1] + s * inc.dw[1] - g[1] * dt];
    finish(state, p, proposal)
}

/// Running entropy-process value and its decomposition for one particle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub particle_id: u64,
    /// Step the next accumulated increment must carry.
    pub next_step: u64,
    pub v0: f64,
    pub v: f64,
    pub m: f64,
    pub f: f64,
}

impl Decomposition {
    pub fn start(state: &ParticleState, p: &impl DensitySampler, nl: &Nonlinearity) -> Result<Self> {
        let v0 = nl.pressure(p.density_at(state.x))?;
        Ok(Self { particle_id: state.seed_id, next_step: state.steps, v0, v: v0, m: 0.0, f: 0.0 })
    }

    /// `v − v₀ − M − F`.
    pub fn residual(&self) -> f64 {
        self.v - self.v0 - self.m - self.f
    }
}

/// Adds `ΔM = σ⟨∇v, ΔW⟩` and `ΔF = D dt` evaluated at the left point
/// (`before`, fields `left`) and refreshes `v = φ(p(t+dt, X′))` from `right`.
/// The increment must be the one that moved `before` to `after`.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_decomposition(
    acc: &mut Decomposition,
    before: &ParticleState,
    after: &ParticleState,
    left: &impl FieldSampler,
    right: &impl DensitySampler,
    nl: &Nonlinearity,
    dt: f64,
    inc: &Increment,
) -> Result<()> {
    let consistent = inc.particle_id == acc.particle_id
        && before.seed_id == acc.particle_id
        && after.seed_id == acc.particle_id
        && inc.step == acc.next_step
        && inc.step == before.steps
        && after.steps == before.steps + 1;
    if !consistent {
        return Err(Error::Contract(format!(
            "increment (particle {}, step {}) does not match decomposition (particle {}, step {})",
            inc.particle_id, inc.step, acc.particle_id, acc.next_step
        )));
    }
    let s = sigma_at(left, nl, before.x)?;
    let g = left.grad_pressure_at(before.x);
    acc.m += s * (g[0] * inc.dw[0] + g[1] * inc.dw[1]);
    acc.f += left.dissipation_at(before.x) * dt;
    acc.v = nl.pressure(right.density_at(after.x))?;
    acc.next_step += 1;
    Ok(())
}

/// One combined step: moves the particle and updates its decomposition.
#[allow(clippy::too_many_arguments)]
fn advance(
    state: &ParticleState,
    acc: &mut Decomposition,
    left: &FrameAt<'_>,
    right: &FrameAt<'_>,
    nl: &Nonlinearity,
    beta: Option<&PerturbationPotential>,
    dt: f64,
    inc: &Increment,
) -> Result<ParticleState> {
    let next = match beta {
        Some(b) => em_step_perturbed(state, left, nl, b, dt, inc)?,
        None => em_step_reflected(state, left, nl, dt, inc)?,
    };
    accumulate_decomposition(acc, state, &next, left, right, nl, dt, inc)?;
    Ok(next)
}

/// Draws the initial position of particle `id`: inverse CDF of the
/// piecewise-constant density in 1-D, rejection from the max envelope in 2-D.
pub fn sample_initial(p: &DensityField, seed: u64, id: u64) -> Result<Point> {
    let grid = &p.grid;
    let mut rng = ParticleRng::new(seed, id);
    if grid.dim() == 1 {
        let u = rng.uniforms(INIT_BASE)[0] * p.mass() / grid.cell_volume();
        let mut acc = 0.0;
        for (i, &v) in p.values.iter().enumerate() {
            if acc + v >= u || i + 1 == p.values.len() {
                let frac = if v > 0.0 { ((u - acc) / v).clamp(0.0, 1.0) } else { 0.5 };
                return Ok([grid.face_axis(0, i) + frac * grid.dx(0), 0.0]);
            }
            acc += v;
        }
        unreachable!("loop returns on the last cell");
    }
    let envelope = p.max();
    for attempt in 0..MAX_REJECTIONS {
        let [a, b] = rng.uniforms(INIT_BASE + 2 * attempt);
        let c = rng.uniforms(INIT_BASE + 2 * attempt + 1)[0];
        let x = [grid.lo(0) + a * grid.width(0), grid.lo(1) + b * grid.width(1)];
        if c * envelope <= p.values[grid.locate(x)] {
            return Ok(x);
        }
    }
    Err(Error::Solver(format!("rejection sampling for particle {id} did not accept")))
}

/// Exact cell-overlap average of a piecewise-constant field on a coarser box grid.
pub fn aggregate_to_bins(field: &DensityField, bins: &Grid) -> Vec<f64> {
    let g = &field.grid;
    let overlaps = |axis: usize| -> Vec<Vec<(usize, f64)>> {
        (0..g.n_cells(axis))
            .map(|i| {
                let (a, b) = (g.face_axis(axis, i), g.face_axis(axis, i + 1));
                (0..bins.n_cells(axis))
                    .filter_map(|k| {
                        let len = b.min(bins.face_axis(axis, k + 1)) - a.max(bins.face_axis(axis, k));
                        (len > 0.0).then_some((k, len))
                    })
                    .collect()
            })
            .collect()
    };
    let ox = overlaps(0);
    let oy = if g.dim() == 2 { overlaps(1) } else { vec![vec![(0, 1.0)]] };
    let mut out = vec![0.0; bins.len()];
    for (c, &v) in field.values.iter().enumerate() {
        let (i, j) = g.coords(c);
        for &(bi, lx) in &ox[i] {
            for &(bj, ly) in &oy[j] {
                out[bins.index(bi, bj)] += v * lx * ly;
            }
        }
    }
    let vol = bins.cell_volume();
    out.iter_mut().for_each(|v| *v /= vol);
    out
}

/// `Σ |a − b| · bin volume`.
pub fn binned_l1(a: &[f64], b: &[f64], bins: &Grid) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
    bins.integrate(&d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub particle_id: u64,
    pub times: Vec<f64>,
    pub x_path: Vec<Point>,
    pub l_path: Vec<f64>,
    pub v_path: Vec<f64>,
    pub m_path: Vec<f64>,
    pub f_path: Vec<f64>,
    pub dw_increments: Option<Vec<[f64; 2]>>,
}

impl TrajectoryRecord {
    fn new(id: u64, keep_dw: bool) -> Self {
        Self {
            particle_id: id,
            times: vec![],
            x_path: vec![],
            l_path: vec![],
            v_path: vec![],
            m_path: vec![],
            f_path: vec![],
            dw_increments: keep_dw.then(Vec::new),
        }
    }

    fn push(&mut self, t: f64, s: &ParticleState, acc: &Decomposition) {
        self.times.push(t);
        self.x_path.push(s.x);
        self.l_path.push(s.l);
        self.v_path.push(acc.v);
        self.m_path.push(acc.m);
        self.f_path.push(acc.f);
    }

    /// Largest `|v(t) − v(0) − M(t) − F(t)|` along the record.
    pub fn max_residual(&self) -> f64 {
        (0..self.times.len())
            .map(|k| (self.v_path[k] - self.v_path[0] - self.m_path[k] - self.f_path[k]).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOptions {
    pub n_particles: usize,
    pub dt: f64,
    pub seed: u64,
    /// Histogram bins per axis.
    pub hist_bins: usize,
    /// Full paths are kept for the first `record_particles` particles.
    pub record_particles: usize,
    /// Steps between recorded path points.
    pub record_stride: usize,
    pub keep_increments: bool,
}

impl EnsembleOptions {
    pub fn new(n_particles: usize, dt: f64, seed: u64) -> Self {
        Self { n_particles, dt, seed, hist_bins: 20, record_particles: 0, record_stride: 1, keep_increments: false }
    }
}

/// Ensemble statistics at one snapshot time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSummary {
    pub t: f64,
    pub mean_v: f64,
    pub mean_m: f64,
    pub se_m: f64,
    pub mean_f: f64,
    pub se_f: f64,
    pub mean_l: f64,
    /// Fraction of particles with positive local time.
    pub touched: f64,
    /// Particle histogram density per bin.
    pub hist: Vec<f64>,
    /// Solver density averaged over the same bins.
    pub pde_hist: Vec<f64>,
    pub hist_l1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleFinal {
    pub id: u64,
    pub x0: Point,
    pub state: ParticleState,
    pub decomposition: Decomposition,
}

#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub dt: f64,
    pub seed: u64,
    pub n_steps: usize,
    pub bins: Grid,
    pub summaries: Vec<SnapshotSummary>,
    pub finals: Vec<ParticleFinal>,
    pub trajectories: Vec<TrajectoryRecord>,
}

impl EnsembleResult {
    pub fn summary_at(&self, t: f64) -> Option<&SnapshotSummary> {
        let tol = 1e-3 * self.dt;
        self.summaries.iter().find(|s| (s.t - t).abs() <= tol)
    }

    pub fn last(&self) -> &SnapshotSummary {
        &self.summaries[self.summaries.len() - 1]
    }

    /// Largest per-path decomposition residual at the final time.
    pub fn max_final_residual(&self) -> f64 {
        self.finals.iter().map(|p| p.decomposition.residual().abs()).fold(0.0, f64::max)
    }

    pub fn summaries_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summaries)?)
    }

    /// Writes recorded paths as `particle_id,t,x[,y],l,v,m,f`; refuses to
    /// write more than `max_rows` rows.
    pub fn write_trajectories_csv<W: Write>(&self, out: W, max_rows: usize) -> Result<()> {
        let rows: usize = self.trajectories.iter().map(|t| t.times.len()).sum();
        if rows > max_rows {
            return Err(Error::Input(format!("trajectory dump of {rows} rows exceeds the limit of {max_rows}")));
        }
        let dim = self.bins.dim();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["particle_id", "t", "x"];
        if dim == 2 {
            header.push("y");
        }
        header.extend(["l", "v", "m", "f"]);
        w.write_record(&header)?;
        for tr in &self.trajectories {
            for k in 0..tr.times.len() {
                let mut rec = vec![tr.particle_id.to_string(), tr.times[k].to_string(), tr.x_path[k][0].to_string()];
                if dim == 2 {
                    rec.push(tr.x_path[k][1].to_string());
                }
                rec.extend([tr.l_path[k], tr.v_path[k], tr.m_path[k], tr.f_path[k]].iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Accum {
    n: f64,
    v: Vec<f64>,
    m: Vec<f64>,
    m2: Vec<f64>,
    f: Vec<f64>,
    f2: Vec<f64>,
    l: Vec<f64>,
    touched: Vec<f64>,
    hist: Vec<Vec<f64>>,
}

impl Accum {
    fn new(n_snap: usize, n_bins: usize) -> Self {
        let z = vec![0.0; n_snap];
        Self {
            n: 0.0,
            v: z.clone(),
            m: z.clone(),
            m2: z.clone(),
            f: z.clone(),
            f2: z.clone(),
            l: z.clone(),
            touched: z,
            hist: vec![vec![0.0; n_bins]; n_snap],
        }
    }

    fn add(&mut self, k: usize, s: &ParticleState, acc: &Decomposition, bin: usize) {
        self.v[k] += acc.v;
        self.m[k] += acc.m;
        self.m2[k] += acc.m * acc.m;
        self.f[k] += acc.f;
        self.f2[k] += acc.f * acc.f;
        self.l[k] += s.l;
        if s.l > 0.0 {
            self.touched[k] += 1.0;
        }
        self.hist[k][bin] += 1.0;
    }

    fn merge(mut self, other: &Accum) -> Self {
        let add = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        self.n += other.n;
        add(&mut self.v, &other.v);
        add(&mut self.m, &other.m);
        add(&mut self.m2, &other.m2);
        add(&mut self.f, &other.f);
        add(&mut self.f2, &other.f2);
        add(&mut self.l, &other.l);
        add(&mut self.touched, &other.touched);
        self.hist.iter_mut().zip(&other.hist).for_each(|(a, b)| add(a, b));
        self
    }
}

/// Pairwise merge in index order, so the result does not depend on how
/// many workers produced the parts.
fn merge_pairwise(parts: &[Accum]) -> Accum {
    if parts.len() == 1 {
        return parts[0].clone();
    }
    let mid = parts.len() / 2;
    merge_pairwise(&parts[..mid]).merge(&merge_pairwise(&parts[mid..]))
}

fn mean_se(sum: f64, sum2: f64, n: f64) -> (f64, f64) {
    let mean = sum / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let var = ((sum2 - n * mean * mean) / (n - 1.0)).max(0.0);
    (mean, (var / n).sqrt())
}

/// Steps per snapshot interval, requiring `dt` to divide the spacing.
fn steps_per_snapshot(run: &PdeRun, dt: f64) -> Result<usize> {
    let times = run.times();
    if times.len() < 2 {
        return Err(Error::Input("the run needs at least two snapshots".into()));
    }
    let spacing = times[1] - times[0];
    let per = (spacing / dt).round();
    if per < 1.0 || (per * dt - spacing).abs() > 1e-9 * spacing {
        return Err(Error::Input(format!("particle dt {dt} does not divide the snapshot spacing {spacing}")));
    }
    let per = per as usize;
    for w in times.windows(2).take(times.len().saturating_sub(2)) {
        if ((w[1] - w[0]) - spacing).abs() > 1e-9 * spacing {
            return Err(Error::Input("snapshots must be evenly spaced".into()));
        }
    }
    let last = times[times.len() - 1] - times[times.len() - 2];
    if ((last - spacing).abs() > 1e-9 * spacing) && (last / dt - (last / dt).round()).abs() > 1e-9 {
        return Err(Error::Input(format!("particle dt {dt} does not divide the last snapshot interval {last}")));
    }
    Ok(per)
}

/// Simulates `opts.n_particles` reflected particles through `run`, using
/// the run's perturbation as drift when present.
pub fn simulate_ensemble(run: &PdeRun, opts: &EnsembleOptions) -> Result<EnsembleResult> {
    if opts.n_particles == 0 || opts.hist_bins == 0 || opts.record_stride == 0 {
        return Err(Error::Input("particle count, histogram bins and record stride must be positive".into()));
    }
    let series = FieldSeries::from_run(run)?;
    simulate_with_series(run, &series, opts)
}

pub fn simulate_with_series(run: &PdeRun, series: &FieldSeries, opts: &EnsembleOptions) -> Result<EnsembleResult> {
    let per = steps_per_snapshot(run, opts.dt)?;
    let grid = run.grid.clone();
    let dim = grid.dim();
    let times = run.times();
    let t0 = times[0];
    let n_steps = ((run.t_end() - t0) / opts.dt).round() as usize;
    let bins = if dim == 1 {
        Grid::interval(grid.lo(0), grid.hi(0), opts.hist_bins)?
    } else {
        Grid::rectangle([grid.lo(0), grid.hi(0)], [grid.lo(1), grid.hi(1)], [opts.hist_bins; 2])?
    };
    // snapshot index reached after `k` steps, if any
    let snap_of_step = |k: usize| -> Option<usize> {
        if k == n_steps {
            Some(times.len() - 1)
        } else if k.is_multiple_of(per) {
            Some(k / per)
        } else {
            None
        }
    };
    let nl = &series.nl;
    let beta = series.beta.as_ref();
    let n_snap = times.len();
    let n_chunks = opts.n_particles.div_ceil(CHUNK);

    type ChunkOut = (Accum, Vec<ParticleFinal>, Vec<TrajectoryRecord>);
    let chunk_results: Vec<ChunkOut> = (0..n_chunks)
        .into_par_iter()
        .map(|c| -> Result<ChunkOut> {
            let mut accum = Accum::new(n_snap, bins.len());
            let mut finals = Vec::with_capacity(CHUNK);
            let mut records = Vec::new();
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(opts.n_particles);
            for id in lo..hi {
                let id = id as u64;
                let x0 = sample_initial(&run.snapshots[0], opts.seed, id)?;
                let mut state = ParticleState::new(x0, id);
                let mut acc = Decomposition::start(&state, &series.at_step(0, per), nl)?;
                let mut rng = ParticleRng::new(opts.seed, id);
                let mut record = ((id as usize) < opts.record_particles)
                    .then(|| TrajectoryRecord::new(id, opts.keep_increments));
                if let Some(r) = record.as_mut() {
                    r.push(t0, &state, &acc);
                }
                accum.add(0, &state, &acc, bins.locate(state.x));
                for k in 0..n_steps {
                    let inc = Increment::from_rng(&mut rng, id, k as u64, opts.dt, dim);
                    let left = series.at_step(k, per);
                    let right = series.at_step(k + 1, per);
                    state = advance(&state, &mut acc, &left, &right, nl, beta, opts.dt, &inc)?;
                    if let Some(s) = snap_of_step(k + 1) {
                        accum.add(s, &state, &acc, bins.locate(state.x));
                    }
                    if let Some(r) = record.as_mut() {
                        if let Some(dw) = r.dw_increments.as_mut() {
                            dw.push(inc.dw);
                        }
                        if (k + 1) % opts.record_stride == 0 || k + 1 == n_steps {
                            r.push(t0 + (k + 1) as f64 * opts.dt, &state, &acc);
                        }
                    }
                }
                accum.n += 1.0;
                finals.push(ParticleFinal { id, x0, state, decomposition: acc });
                records.extend(record);
            }
            Ok((accum, finals, records))
        })
        .collect::<Result<Vec<_>>>()?;

    let accums: Vec<Accum> = chunk_results.iter().map(|r| r.0.clone()).collect();
    let total = merge_pairwise(&accums);
    let n = total.n;
    let summaries = (0..n_snap)
        .map(|k| {
            let (mean_m, se_m) = mean_se(total.m[k], total.m2[k], n);
            let (mean_f, se_f) = mean_se(total.f[k], total.f2[k], n);
            let hist: Vec<f64> = total.hist[k].iter().map(|c| c / (n * bins.cell_volume())).collect();
            let pde_hist = aggregate_to_bins(&run.snapshots[k], &bins);
            let hist_l1 = binned_l1(&hist, &pde_hist, &bins);
            SnapshotSummary {
                t: times[k],
                mean_v: total.v[k] / n,
                mean_m,
                se_m,
                mean_f,
                se_f,
                mean_l: total.l[k] / n,
                touched: total.touched[k] / n,
                hist,
                pde_hist,
                hist_l1,
            }
        })
        .collect();
    let mut finals = Vec::with_capacity(opts.n_particles);
    let mut trajectories = Vec::new();
    for (_, f, r) in chunk_results {
        finals.extend(f);
        trajectories.extend(r);
    }
    Ok(EnsembleResult { dt: opts.dt, seed: opts.seed, n_steps, bins, summaries, finals, trajectories })
}

/// Residual `v(t+dt, X′) − v(t, X) − ΔM − ΔF` of a single step from `x`
/// at time `t` with increment `√dt·ξ`.
pub fn one_step_residual(series: &FieldSeries, x: Point, t: f64, dt: f64, xi: [f64; 2]) -> Result<f64> {
    let dim = series.grid().dim();
    let s = dt.sqrt();
    let inc = Increment { particle_id: 0, step: 0, dw: [s * xi[0], if dim == 2 { s * xi[1] } else { 0.0 }] };
    let state = ParticleState::new(x, 0);
    let left = series.at(t);
    let right = series.at(t + dt);
    let mut acc = Decomposition::start(&state, &left, &series.nl)?;
    advance(&state, &mut acc, &left, &right, &series.nl, series.beta.as_ref(), dt, &inc)?;
    Ok(acc.residual())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalRateOptions {
    pub n_outer: usize,
    /// Antithetic path pairs per starting point.
    pub inner_pairs: usize,
    pub dt: f64,
    pub seed: u64,
    /// Horizons `t − t₀` in steps.
    pub horizons: Vec<usize>,
}

/// Least-squares fit of the mean increment ratio `[v(t,Xₜ) − v(t₀,X_{t₀})]/(t − t₀)`
/// against `D(t₀, X_{t₀})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub horizon_steps: usize,
    pub dt_horizon: f64,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y ≈ a + b x`; returns `(b, a, r²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = crate::grid::pairwise_sum(x) / n;
    let my = crate::grid::pairwise_sum(y) / n;
    let sxx: Vec<f64> = x.iter().map(|a| (a - mx) * (a - mx)).collect();
    let sxy: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let syy: Vec<f64> = y.iter().map(|b| (b - my) * (b - my)).collect();
    let (sxx, sxy, syy) = (pairwise_sum_vec(&sxx), pairwise_sum_vec(&sxy), pairwise_sum_vec(&syy));
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}

fn pairwise_sum_vec(v: &[f64]) -> f64 {
    crate::grid::pairwise_sum(v)
}

/// Conditional rate of the entropy process at the run's initial time.
/// Starting points are drawn from the first snapshot; each carries
/// `inner_pairs` antithetic path pairs.
pub fn conditional_rate(run: &PdeRun, opts: &ConditionalRateOptions) -> Result<Vec<RateFit>> {
    let series = FieldSeries::from_run(run)?;
    let per = steps_per_snapshot(run, opts.dt)?;
    let max_h = *opts.horizons.iter().max().ok_or_else(|| Error::Input("no horizons given".into()))?;
    let t0 = run.t_start();
    if t0 + max_h as f64 * opts.dt > run.t_end() + 1e-12 {
        return Err(Error::Input("conditional-rate horizon runs past the end of the solver run".into()));
    }
    if opts.inner_pairs == 0 || opts.n_outer < 3 {
        return Err(Error::Input("need at least 3 starting points and one path pair".into()));
    }
    let nl = &series.nl;
    let beta = series.beta.as_ref();
    let dim = series.grid().dim();
    let first = series.at_step(0, per);
    let per_outer = opts.horizons.len();
    let rows = (0..opts.n_outer)
        .into_par_iter()
        .map(|i| -> Result<(f64, Vec<f64>)> {
            let x0 = sample_initial(&run.snapshots[0], opts.seed, i as u64)?;
            let d0 = first.dissipation_at(x0);
            let mut sums = vec![0.0; per_outer];
            for j in 0..opts.inner_pairs {
                let path_id = (1u64 << 40) + (i * opts.inner_pairs + j) as u64;
                for sign in [1.0, -1.0] {
                    let mut rng = ParticleRng::new(opts.seed, path_id);
                    let mut state = ParticleState::new(x0, path_id);
                    let mut acc = Decomposition::start(&state, &first, nl)?;
                    for k in 0..max_h {
                        let mut inc = Increment::from_rng(&mut rng, path_id, k as u64, opts.dt, dim);
                        if sign < 0.0 {
                            inc = inc.negated();
                        }
                        let left = series.at_step(k, per);
                        let right = series.at_step(k + 1, per);
                        state = advance(&state, &mut acc, &left, &right, nl, beta, opts.dt, &inc)?;
                        for (h, &steps) in opts.horizons.iter().enumerate() {
                            if steps == k + 1 {
                                sums[h] += (acc.v - acc.v0) / (steps as f64 * opts.dt);
                            }
                        }
                    }
                }
            }
            let n_paths = 2.0 * opts.inner_pairs as f64;
            Ok((d0, sums.into_iter().map(|s| s / n_paths).collect()))
        })
        .collect::<Result<Vec<_>>>()?;
    let d: Vec<f64> = rows.iter().map(|r| r.0).collect();
    Ok(opts
        .horizons
        .iter()
        .enumerate()
        .map(|(h, &steps)| {
            let y: Vec<f64> = rows.iter().map(|r| r.1[h]).collect();
            let (slope, intercept, r_squared) = linear_fit(&d, &y);
            RateFit { horizon_steps: steps, dt_horizon: steps as f64 * opts.dt, slope, intercept, r_squared }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::{solve, SolveOptions};
    use std::f64::consts::PI;

    fn pm2() -> Nonlinearity {
        Nonlinearity::porous_medium(2.0).unwrap()
    }

    fn unit() -> Grid {
        Grid::interval(0.0, 1.0, 50).unwrap()
    }

    fn inc(dw: f64) -> Increment {
        Increment { particle_id: 0, step: 0, dw: [dw, 0.0] }
    }

    #[test]
    fn interior_step_does_not_reflect() {
        let p = DensityField::uniform(unit());
        let s = em_step_reflected(&ParticleState::new([0.5, 0.0], 0), &p, &pm2(), 1e-4, &inc(0.01)).unwrap();
        assert!((s.x[0] - (0.5 + 2f64.sqrt() * 0.01)).abs() < 1e-15);
        assert_eq!(s.l, 0.0);
        assert_eq!(s.steps, 1);
    }

    #[test]
    fn mirror_reflection() {
        let g = unit();
        let (x, dl) = reflect(&g, [-0.05, 0.0]).unwrap();
        assert!((x[0] - 0.05).abs() < 1e-15 && (dl - 0.05).abs() < 1e-15);
        let (x, dl) = reflect(&g, [1.2, 0.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-15 && (dl - 0.2).abs() < 1e-15);
        assert!(matches!(reflect(&g, [2.5, 0.0]), Err(Error::StepSize(_))));
    }

    #[test]
    fn one_step_variance_matches_quadratic_variation() {
        let p = DensityField::uniform(unit());
        let dt = 1e-4;
        let n = 100_000u64;
        let mut rng = ParticleRng::new(42, 0);
        let mut incs = Vec::with_capacity(n as usize);
        for k in 0..n {
            let mut i = Increment::from_rng(&mut rng, 0, k, dt, 1);
            i.step = 0;
            let s = em_step_reflected(&ParticleState::new([0.5, 0.0], 0), &p, &pm2(), dt, &i).unwrap();
            incs.push(s.x[0] - 0.5);
        }
        let mean = incs.iter().sum::<f64>() / n as f64;
        let var = incs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // variance of the sample variance of a Gaussian is 2σ⁴/(n−1)
        let se = (2.0f64).sqrt() * 2.0 * dt / ((n - 1) as f64).sqrt();
        assert!((var - 2.0 * dt).abs() <= 3.0 * se, "{var}");
    }

    #[test]
    fn perturbed_step_examples() {
        let p = DensityField::uniform(unit());
        let g = unit();
        let beta = PerturbationPotential::cosine(&g, 0, 1.0, 1.0);
        let s = em_step_perturbed(&ParticleState::new([0.5, 0.0], 0), &p, &pm2(), &beta, 1e-3, &inc(0.0)).unwrap();
        assert!((s.x[0] - (0.5 + PI * 1e-3)).abs() < 1e-14);
        let s = em_step_perturbed(&ParticleState::new([0.0, 0.0], 0), &p, &pm2(), &beta, 1e-3, &inc(0.0)).unwrap();
        assert!(s.x[0].abs() < 1e-15);
        let state = ParticleState::new([0.3, 0.0], 0);
        let zero = PerturbationPotential::zero();
        let a = em_step_reflected(&state, &p, &pm2(), 1e-3, &inc(0.02)).unwrap();
        let b = em_step_perturbed(&state, &p, &pm2(), &zero, 1e-3, &inc(0.02)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_increment_is_a_contract_error() {
        let p = DensityField::uniform(unit());
        let fields = SnapshotFields::new(&p, &pm2(), None).unwrap();
        let s0 = ParticleState::new([0.5, 0.0], 3);
        let good = Increment { particle_id: 3, step: 0, dw: [0.01, 0.0] };
        assert!(matches!(em_step_reflected(&s0, &p, &pm2(), 1e-4, &inc(0.01)), Err(Error::Contract(_))));
        let s1 = em_step_reflected(&s0, &p, &pm2(), 1e-4, &good).unwrap();
        let mut acc = Decomposition::start(&s0, &fields, &pm2()).unwrap();
        accumulate_decomposition(&mut acc, &s0, &s1, &fields, &fields, &pm2(), 1e-4, &good).unwrap();
        // reusing the same increment for the next step is rejected
        let err = accumulate_decomposition(&mut acc, &s1, &s1, &fields, &fields, &pm2(), 1e-4, &good);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    fn run(p0: DensityField, beta: Option<&PerturbationPotential>, t_end: f64) -> PdeRun {
        let spacing = 1e-4;
        let limit = crate::pde::cfl_dt(&p0, &pm2());
        let per = (spacing / limit).ceil() as usize;
        let dt = spacing / per as f64;
        solve(&p0, &pm2(), beta, &SolveOptions { t_end, dt, snapshot_every: per }).unwrap()
    }

    #[test]
    fn stationary_ensemble_has_zero_decomposition() {
        let r = run(DensityField::uniform(unit()), None, 0.01);
        let res = simulate_ensemble(&r, &EnsembleOptions { record_particles: 2, ..EnsembleOptions::new(500, 1e-4, 1) }).unwrap();
        for f in &res.finals {
            assert_eq!(f.decomposition.m, 0.0);
            assert_eq!(f.decomposition.f, 0.0);
            assert_eq!(f.decomposition.v, f.decomposition.v0);
        }
        assert_eq!(res.trajectories.len(), 2);
        assert_eq!(res.trajectories[0].times.len(), 101);
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let g = unit();
        let p0 = DensityField::from_fn(g, |x| 1.0 + 0.5 * (PI * x[0]).cos(), 0.0).unwrap();
        let r = run(p0, None, 0.002);
        let opts = EnsembleOptions::new(300, 1e-4, 9);
        let a = simulate_ensemble(&r, &opts).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| simulate_ensemble(&r, &opts)).unwrap();
        assert_eq!(a.summaries, b.summaries);
        assert_eq!(a.finals, b.finals);
    }

    #[test]
    fn inverse_cdf_sampling_reproduces_density() {
        let g = Grid::interval(0.0, 1.0, 100).unwrap();
        let p = DensityField::from_fn(g, |x| 1.0 + 0.5 * (PI * x[0]).cos(), 0.0).unwrap();
        let bins = Grid::interval(0.0, 1.0, 10).unwrap();
        let n = 20_000;
        let mut hist = vec![0.0; 10];
        for id in 0..n {
            hist[bins.locate(sample_initial(&p, 3, id).unwrap())] += 1.0 / (n as f64 * 0.1);
        }
        assert!(binned_l1(&hist, &aggregate_to_bins(&p, &bins), &bins) < 0.05);
    }

    #[test]
    fn rejection_sampling_in_two_dimensions() {
        let g = Grid::rectangle([0.0, 1.0], [0.0, 2.0], [20, 20]).unwrap();
        let p = DensityField::from_fn(g.clone(), |x| 1.0 + 0.5 * (PI * x[0]).cos(), 0.0).unwrap().normalized().unwrap();
        let bins = Grid::rectangle([0.0, 1.0], [0.0, 2.0], [4, 4]).unwrap();
        let n = 20_000;
        let mut hist = vec![0.0; bins.len()];
        for id in 0..n {
            let x = sample_initial(&p, 5, id).unwrap();
            assert!(g.contains(x));
            hist[bins.locate(x)] += 1.0 / (n as f64 * bins.cell_volume());
        }
        assert!(binned_l1(&hist, &aggregate_to_bins(&p, &bins), &bins) < 0.05);
    }

    #[test]
    fn linear_fit_recovers_a_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|x| 3.0 - 2.0 * x).collect();
        let (b, a, r2) = linear_fit(&x, &y);
        assert!((b + 2.0).abs() < 1e-12 && (a - 3.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }
}
