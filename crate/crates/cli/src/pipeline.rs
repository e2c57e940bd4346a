//! Stage orchestration: PDE runs, then particles, then the analyses.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use trajent_core::entropy::{cross_term, dissipation_functional, perturbed_dissipation_field};
use trajent_core::pde::{solve, PdeRun, SolveOptions};
use trajent_core::transport::{
    curve_metric_slope, displacement_interpolation, hwi_check, random_smooth_pair, w2_1d, SlopeReport,
    TransportPlan1D,
};
use trajent_core::{entropy_slope_comparison, simulate_ensemble, verify_identity, DensityField, EnsembleOptions};

use crate::config::Experiment;
use crate::verdict::Verdict;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    Simulate,
    Verify,
    Slopes,
    Hwi,
    All,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Simulate => "simulate",
            Command::Verify => "verify",
            Command::Slopes => "slopes",
            Command::Hwi => "hwi",
            Command::All => "all",
        }
    }

    fn runs(self, stage: Command) -> bool {
        self == stage || self == Command::All
    }

    fn needs_perturbed(self) -> bool {
        matches!(self, Command::Solve | Command::Verify | Command::Slopes | Command::All)
    }
}

#[derive(Debug)]
pub enum RunError {
    /// The output directory could not be prepared.
    Output(PathBuf, std::io::Error),
    Io(PathBuf, std::io::Error),
    Core(trajent_core::Error),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Output(p, e) => write!(f, "cannot use output directory {}: {e}", p.display()),
            RunError::Io(p, e) => write!(f, "cannot write {}: {e}", p.display()),
            RunError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<trajent_core::Error> for RunError {
    fn from(e: trajent_core::Error) -> Self {
        RunError::Core(e)
    }
}

type Result<T> = std::result::Result<T, RunError>;

struct Out<'a> {
    dir: &'a Path,
}

impl Out<'_> {
    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        File::create(&path).map(BufWriter::new).map_err(|e| RunError::Io(path, e))
    }

    fn json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        let mut w = self.create(name)?;
        let path = self.dir.join(name);
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| RunError::Core(e.into()))?;
        writeln!(w).and_then(|_| w.flush()).map_err(|e| RunError::Io(path, e))
    }

    fn field(&self, name: &str, p: &DensityField) -> Result<()> {
        p.write_csv(self.create(name)?)?;
        Ok(())
    }

    /// Long-format `t,x[,y],value` dump of every `stride`-th snapshot.
    fn snapshots(&self, name: &str, run: &PdeRun, stride: usize) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = self.create(name)?;
        let io = |e| RunError::Io(path.clone(), e);
        let dim = run.grid.dim();
        writeln!(w, "{}", if dim == 1 { "t,x,value" } else { "t,x,y,value" }).map_err(io)?;
        let last = run.snapshots.len() - 1;
        for (_, s) in run.snapshots.iter().enumerate().filter(|(k, _)| k % stride == 0 || *k == last) {
            for (c, v) in s.values.iter().enumerate() {
                let x = run.grid.center(c);
                if dim == 1 {
                    writeln!(w, "{},{},{v}", s.time, x[0]).map_err(io)?;
                } else {
                    writeln!(w, "{},{},{},{v}", s.time, x[0], x[1]).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)
    }
}

fn solve_run(exp: &Experiment, p0: &DensityField, t_end: f64, perturbed: bool) -> Result<PdeRun> {
    let (beta, dt) = if perturbed { (exp.beta.as_ref(), exp.dt_perturbed) } else { (None, exp.dt) };
    let snapshot_every = (exp.spacing / dt).round() as usize;
    Ok(solve(p0, &exp.nl, beta, &SolveOptions { t_end, dt, snapshot_every })?)
}

/// Runs the stages `command` asks for and writes artifacts into `out`.
pub fn run_experiment(exp: &Experiment, command: Command, out: &Path) -> Result<Verdict> {
    std::fs::create_dir_all(out).map_err(|e| RunError::Output(out.to_path_buf(), e))?;
    let out = Out { dir: out };
    let cfg = &exp.config;
    let mut verdict = Verdict::new(command.name());

    let mut run = None;
    let mut perturbed = None;
    if command != Command::Hwi {
        let r = solve_run(exp, &exp.p0, cfg.time.t_end, false)?;
        out.json("run_summary.json", &r.summary())?;
        out.field("density_initial.csv", &r.snapshots[0])?;
        out.field("density_final.csv", r.snapshots.last().expect("runs keep their first snapshot"))?;
        out.snapshots("snapshots.csv", &r, cfg.output.snapshot_stride)?;
        if exp.beta.is_some() && command.needs_perturbed() {
            let p = solve_run(exp, &exp.p0, cfg.time.t_end, true)?;
            out.json("perturbed_run_summary.json", &p.summary())?;
            out.field("perturbed_density_final.csv", p.snapshots.last().expect("runs keep their first snapshot"))?;
            out.snapshots("perturbed_snapshots.csv", &p, cfg.output.snapshot_stride)?;
            perturbed = Some(p);
        }
        run = Some(r);
    }

    if let Some(run) = &run {
        if command.runs(Command::Simulate) {
            simulate_stage(exp, run, &out, &mut verdict)?;
        }
        if command.runs(Command::Verify) {
            verify_stage(exp, run, perturbed.as_ref(), &out, &mut verdict)?;
        }
        if command.runs(Command::Slopes) {
            slopes_stage(exp, run, perturbed.as_ref(), &out, &mut verdict)?;
        }
    }
    if command.runs(Command::Hwi) {
        hwi_stage(exp, &out, &mut verdict)?;
    }
    std::fs::write(out.dir.join("verdict.json"), verdict.to_json()).map_err(|e| RunError::Io(out.dir.join("verdict.json"), e))?;
    Ok(verdict)
}

const DECOMPOSITION: &str = "Eq8-decomposition";

fn simulate_stage(exp: &Experiment, run: &PdeRun, out: &Out, verdict: &mut Verdict) -> Result<()> {
    let names = ["decomposition_martingale", "decomposition_drift", "marginal_law"];
    let skip_all = |verdict: &mut Verdict, why: &str| names.iter().for_each(|n| verdict.skip(n, DECOMPOSITION, why));
    let Some(pc) = &exp.config.particles else {
        skip_all(verdict, "no [particles] section");
        return Ok(());
    };
    if !exp.config.checks.decomposition {
        skip_all(verdict, "disabled");
        return Ok(());
    }
    let opts = EnsembleOptions {
        n_particles: pc.count,
        dt: pc.dt,
        seed: pc.seed,
        hist_bins: pc.hist_bins,
        record_particles: pc.record,
        record_stride: pc.record_stride,
        keep_increments: false,
    };
    let ens = simulate_ensemble(run, &opts)?;
    out.json("ensemble_summary.json", &ens.summaries)?;
    if pc.record > 0 {
        ens.write_trajectories_csv(out.create("trajectories.csv")?, pc.max_rows)?;
    }
    let last = ens.last();
    let expected = *verify_identity(run)?.rhs.last().expect("identity has a final entry");
    verdict.measure(names[0], DECOMPOSITION, last.mean_m.abs(), 3.0 * last.se_m);
    let tol = (3.0 * last.se_f).max(0.05 * expected.abs());
    verdict.measure(names[1], DECOMPOSITION, (last.mean_f - expected).abs(), tol);
    verdict.measure(names[2], DECOMPOSITION, last.hist_l1, 0.1);
    verdict.annotate(names[2], format!("histogram vs solver at t = {}", last.t));
    Ok(())
}

fn verify_stage(exp: &Experiment, run: &PdeRun, perturbed: Option<&PdeRun>, out: &Out, verdict: &mut Verdict) -> Result<()> {
    let toggles = exp.config.checks;
    if toggles.identity {
        let r = verify_identity(run)?;
        r.write_csv(out.create("identity.csv")?)?;
        out.json("identity_summary.json", &r.summary())?;
        verdict.measure("identity", "Eq4", r.final_rel_residual(), 0.01);
        if !r.monotone {
            verdict.reject("identity", "entropy increased between snapshots");
        }
    } else {
        verdict.skip("identity", "Eq4", "disabled");
    }

    let names = [("perturbed_identity", "Eq17"), ("perturbed_dissipation", "Eq16")];
    let why = match (toggles.perturbed_identity, perturbed) {
        (false, _) => Some("disabled"),
        (true, None) => Some("no perturbation configured"),
        _ => None,
    };
    if let Some(why) = why {
        names.iter().for_each(|(n, l)| verdict.skip(n, l, why));
        return Ok(());
    }
    let prun = perturbed.expect("checked above");
    let beta = prun.perturbation.as_ref().expect("perturbed runs carry their potential");
    let r = verify_identity(prun)?;
    r.write_csv(out.create("perturbed_identity.csv")?)?;
    out.json("perturbed_identity_summary.json", &r.summary())?;
    verdict.measure(names[0].0, names[0].1, r.final_rel_residual(), 0.02);
    if let Some(h) = &prun.halted {
        verdict.annotate(names[0].0, format!("run truncated: {h}"));
    }

    // ∫D^β p against −(I + cross) on every snapshot
    let mut worst: f64 = 0.0;
    for p in &prun.snapshots {
        let d = perturbed_dissipation_field(p, &prun.nl, beta)?;
        let dp: Vec<f64> = d.iter().zip(&p.values).map(|(a, b)| a * b).collect();
        let expected = -dissipation_functional(p, &prun.nl)? - cross_term(p, &prun.nl, beta)?;
        worst = worst.max((p.grid.integrate(&dp) - expected).abs() / (expected.abs() + 1e-8));
    }
    verdict.measure(names[1].0, names[1].1, worst, 0.01);
    Ok(())
}

/// `(|fd − analytic|, tolerance)` at the smallest spacing of the ladder.
fn slope_error(r: &SlopeReport, rel: f64) -> (f64, f64) {
    let k = (0..r.spacings.len()).min_by(|&a, &b| r.spacings[a].total_cmp(&r.spacings[b])).expect("non-empty ladder");
    ((r.finite_difference_slopes[k] - r.analytic_slope).abs(), rel * r.analytic_slope.abs() + 1e-6)
}

fn slopes_stage(exp: &Experiment, run: &PdeRun, perturbed: Option<&PdeRun>, out: &Out, verdict: &mut Verdict) -> Result<()> {
    let toggles = exp.config.checks;
    let names = [
        ("metric_slope", "Eq19"),
        ("metric_slope_perturbed", "Eq20"),
        ("entropy_slope", "FW"),
        ("entropy_slope_perturbed", "FWp"),
        ("slope_order", "FW-FWp"),
    ];
    if exp.grid.dim() != 1 {
        names.iter().for_each(|(n, l)| verdict.skip(n, l, "transport checks are 1-D only"));
        return Ok(());
    }
    let sc = &exp.config.slopes;
    let t0 = sc.t0;
    // perturbed curve leaving the unperturbed state at t0
    let pcurve = match (&exp.beta, perturbed) {
        (None, _) => None,
        (Some(_), Some(p)) if t0 == run.t_start() => Some(p.clone()),
        (Some(_), _) => {
            let start = run.snapshot_at(t0).expect("t0 validated against the snapshot grid").clone();
            let horizon = t0 + exp.spacing * *sc.ladder.iter().max().expect("ladder validated") as f64;
            Some(solve_run(exp, &start, horizon, true)?)
        }
    };
    let no_beta = "no perturbation configured";

    let mut doc = serde_json::Map::new();
    if toggles.slopes {
        let u = curve_metric_slope(run, t0, &sc.ladder)?;
        let (m, tol) = slope_error(&u, 0.02);
        verdict.measure(names[0].0, names[0].1, m, tol);
        doc.insert("unperturbed_curve".into(), serde_json::to_value(&u).map_err(|e| RunError::Core(e.into()))?);
        match &pcurve {
            Some(pc) => {
                let p = curve_metric_slope(pc, t0, &sc.ladder)?;
                let (m, tol) = slope_error(&p, 0.02);
                verdict.measure(names[1].0, names[1].1, m, tol);
                doc.insert("perturbed_curve".into(), serde_json::to_value(&p).map_err(|e| RunError::Core(e.into()))?);
            }
            None => verdict.skip(names[1].0, names[1].1, no_beta),
        }
    } else {
        names[..2].iter().for_each(|(n, l)| verdict.skip(n, l, "disabled"));
    }

    if toggles.gradient_flow {
        let base = entropy_slope_comparison(run, &[], t0, sc.fd_steps)?;
        let fw = base.entropy_slope_unperturbed.expect("filled by the comparison");
        match base.entropy_ratio_finite_difference {
            Some(ratio) => {
                verdict.measure(names[2].0, names[2].1, (ratio - fw).abs(), 0.03 * fw.abs() + 1e-6);
            }
            None => verdict.fail(names[2].0, names[2].1, "run too short for the finite-difference ratio"),
        }
        let mut report = base;
        match &pcurve {
            None => {
                verdict.skip(names[3].0, names[3].1, no_beta);
                verdict.skip(names[4].0, names[4].1, no_beta);
            }
            Some(pc) => match entropy_slope_comparison(run, &[("perturbed", pc)], t0, sc.fd_steps) {
                Ok(r) => {
                    let ps = &r.entropy_slope_perturbed[0];
                    match ps.finite_difference {
                        Some(fd) => {
                            let tol = 0.03 * ps.analytic.abs() + 1e-6;
                            verdict.measure(names[3].0, names[3].1, (fd - ps.analytic).abs(), tol);
                        }
                        None => verdict.fail(names[3].0, names[3].1, "perturbed run too short"),
                    }
                    verdict.measure(names[4].0, names[4].1, fw - ps.analytic, 1e-12 * fw.abs());
                    report = r;
                }
                Err(e @ trajent_core::Error::SingularDirection(_)) => {
                    verdict.fail(names[3].0, names[3].1, e.to_string());
                    verdict.fail(names[4].0, names[4].1, e.to_string());
                }
                Err(e) => return Err(e.into()),
            },
        }
        doc.insert("entropy_slopes".into(), serde_json::to_value(&report).map_err(|e| RunError::Core(e.into()))?);
    } else {
        names[2..].iter().for_each(|(n, l)| verdict.skip(n, l, "disabled"));
    }
    if !doc.is_empty() {
        out.json("slopes.json", &doc)?;
    }
    Ok(())
}

fn hwi_stage(exp: &Experiment, out: &Out, verdict: &mut Verdict) -> Result<()> {
    if !exp.config.checks.hwi {
        verdict.skip("hwi", "HWI", "disabled");
        verdict.skip("geodesic", "HWI", "disabled");
        return Ok(());
    }
    if exp.grid.dim() != 1 {
        verdict.skip("hwi", "HWI", "transport checks are 1-D only");
        verdict.skip("geodesic", "HWI", "transport checks are 1-D only");
        return Ok(());
    }
    let uniform = DensityField::uniform(exp.grid.clone());
    let mut pairs = vec![("reference".to_string(), None, exp.p0.clone(), uniform.clone())];
    for k in 0..exp.config.hwi.random_pairs as u64 {
        let seed = exp.seed.wrapping_add(k);
        let (a, b) = random_smooth_pair(&exp.grid, seed)?;
        pairs.push((format!("random-{k}"), Some(seed), a, b));
    }
    let mut rows = vec![];
    let mut worst = f64::NEG_INFINITY;
    for (name, seed, a, b) in &pairs {
        let r = hwi_check(a, b, &exp.nl)?;
        worst = worst.max((r.lhs - r.mid).max(r.mid - r.rhs) / (1.0 + r.rhs.abs()));
        rows.push(json!({ "pair": name, "seed": seed, "result": r }));
    }
    out.json("hwi.json", &rows)?;
    verdict.measure("hwi", "HWI", worst.max(0.0), 1e-3);
    verdict.annotate("hwi", format!("{} pairs", pairs.len()));

    let plan = TransportPlan1D::new(&exp.p0, &uniform)?;
    let mut geodesic: f64 = 0.0;
    for t in [0.25, 0.5, 0.75] {
        let rho = displacement_interpolation(&plan, t)?;
        geodesic = geodesic.max((w2_1d(&plan.source, &rho)? - t * plan.w2).abs());
    }
    verdict.measure("geodesic", "HWI", geodesic, 1e-3);
    Ok(())
}
