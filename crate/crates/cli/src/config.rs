//! Experiment configuration: TOML (or the equivalent JSON tree), validated
//! into solver-ready objects.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trajent_core::pde::{cfl_dt, cfl_dt_dividing, drift_cfl_dt, CFL_SAFETY};
use trajent_core::transport::DEFAULT_LADDER;
use trajent_core::{DensityField, Grid, Nonlinearity, NonlinearitySpec, PerturbationPotential};

/// A rejected configuration, pointing at the offending field when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: Option<String>,
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(field: &str, message: impl Into<String>) -> Self {
        Self { field: Some(field.to_string()), line: None, message: message.into() }
    }

    fn plain(message: impl Into<String>) -> Self {
        Self { field: None, line: None, message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error")?;
        if let Some(field) = &self.field {
            write!(f, " in `{field}`")?;
        }
        if let Some(line) = self.line {
            write!(f, " (line {line})")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub nonlinearity: NonlinearitySpec,
    pub grid: GridConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub particles: Option<ParticleConfig>,
    #[serde(default)]
    pub perturbation: PerturbationConfig,
    #[serde(default)]
    pub checks: CheckToggles,
    #[serde(default)]
    pub slopes: SlopeConfig,
    #[serde(default)]
    pub hwi: HwiConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    /// `[lo, hi]` per axis.
    pub extent: Vec<[f64; 2]>,
    pub n_cells: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    #[default]
    Uniform,
    /// `1 + amplitude·cos(π(x − lo)/L)` along `axis`, normalised.
    Cosine {
        amplitude: f64,
        #[serde(default)]
        axis: usize,
    },
    /// Cell values in grid order, as written by the `density_*.csv` dumps.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DtPolicy {
    Fixed(f64),
    Named(String),
}

impl Default for DtPolicy {
    fn default() -> Self {
        DtPolicy::Named("cfl".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_end: f64,
    #[serde(default)]
    pub dt: DtPolicy,
    /// Snapshot spacing; defaults to the particle step, else `t_end/100`.
    #[serde(default)]
    pub snapshot_every: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleConfig {
    pub count: usize,
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    /// Number of particles whose full paths are dumped.
    #[serde(default)]
    pub record: usize,
    #[serde(default = "one")]
    pub record_stride: usize,
    #[serde(default = "twenty")]
    pub hist_bins: usize,
    #[serde(default = "million")]
    pub max_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationConfig {
    #[default]
    None,
    /// `amplitude·cos(kπ(x − lo)/L)` along `axis`.
    Cosine {
        k: f64,
        amplitude: f64,
        #[serde(default)]
        axis: usize,
    },
    /// Sum of cosine modes `[k, amplitude]` along `axis`.
    Custom {
        modes: Vec<[f64; 2]>,
        #[serde(default)]
        axis: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckToggles {
    pub identity: bool,
    pub perturbed_identity: bool,
    pub decomposition: bool,
    pub slopes: bool,
    pub gradient_flow: bool,
    pub hwi: bool,
}

impl Default for CheckToggles {
    fn default() -> Self {
        Self { identity: true, perturbed_identity: true, decomposition: true, slopes: true, gradient_flow: true, hwi: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlopeConfig {
    pub t0: f64,
    /// Snapshot intervals used for the `Δ𝓕/ΔW₂` ratios.
    pub fd_steps: usize,
    /// Finite-difference spacings in snapshot intervals, coarsest first.
    pub ladder: Vec<usize>,
}

impl Default for SlopeConfig {
    fn default() -> Self {
        Self { t0: 0.0, fd_steps: 1, ladder: DEFAULT_LADDER.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HwiConfig {
    pub random_pairs: usize,
}

impl Default for HwiConfig {
    fn default() -> Self {
        Self { random_pairs: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    /// Every n-th snapshot goes to `snapshots.csv`.
    pub snapshot_stride: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, snapshot_stride: 100 }
    }
}

fn one() -> usize {
    1
}

fn twenty() -> usize {
    20
}

fn million() -> usize {
    1_000_000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Toml,
        }
    }
}

/// Parsed configuration plus the text it came from, for diagnostics.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    source: String,
    format: Format,
    base_dir: PathBuf,
}

/// Everything a pipeline run needs, already checked.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub grid: Grid,
    pub nl: Nonlinearity,
    pub p0: DensityField,
    pub beta: Option<PerturbationPotential>,
    /// Snapshot spacing.
    pub spacing: f64,
    pub dt: f64,
    pub dt_perturbed: f64,
    /// Particle seed, also the base seed of the random HWI pairs.
    pub seed: u64,
}

impl LoadedConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let source = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::plain(format!("cannot read {}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&source, Format::from_path(path), base_dir)
    }

    pub fn parse(source: &str, format: Format, base_dir: PathBuf) -> Result<Self, ConfigError> {
        let config = match format {
            Format::Toml => toml::from_str(source).map_err(|e| ConfigError {
                field: None,
                line: e.span().map(|s| line_of(source, s.start)),
                message: e.message().to_string(),
            })?,
            Format::Json => serde_json::from_str(source).map_err(|e| ConfigError {
                field: None,
                line: Some(e.line()),
                message: e.to_string(),
            })?,
        };
        Ok(Self { config, source: source.to_string(), format, base_dir })
    }

    /// Validates the configuration and builds the solver inputs.
    pub fn build(&self) -> Result<Experiment, ConfigError> {
        build(&self.config, &self.base_dir).map_err(|mut e| {
            if let Some(field) = &e.field {
                e.line = locate(&self.source, self.format, field);
            }
            e
        })
    }
}

fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

/// Line of `field` (dotted path) in `source`: the first line naming the last
/// key after the line that opens its section.
fn locate(source: &str, format: Format, field: &str) -> Option<usize> {
    let mut parts = field.split('.');
    let section = parts.next()?;
    let key = parts.next();
    let lines: Vec<&str> = source.lines().collect();
    let opens_section = |l: &str| match format {
        Format::Toml => {
            let t = l.trim();
            t == format!("[{section}]") || t.starts_with(&format!("{section} ")) || t.starts_with(&format!("{section}="))
        }
        Format::Json => l.contains(&format!("\"{section}\"")),
    };
    let start = lines.iter().position(|l| opens_section(l))?;
    let Some(key) = key else { return Some(start + 1) };
    let names_key = |l: &str| match format {
        Format::Toml => {
            let t = l.trim_start();
            t.starts_with(key) && t[key.len()..].trim_start().starts_with('=')
        }
        Format::Json => l.contains(&format!("\"{key}\"")),
    };
    let section_end = |l: &str| format == Format::Toml && l.trim_start().starts_with('[');
    if names_key(lines[start]) {
        return Some(start + 1);
    }
    for (k, l) in lines.iter().enumerate().skip(start + 1) {
        if section_end(l) {
            break;
        }
        if names_key(l) {
            return Some(k + 1);
        }
    }
    Some(start + 1)
}

fn positive(field: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(ConfigError::at(field, format!("must be a positive finite number, got {v}")))
    }
}

/// `a/b` is an integer to relative precision 1e−9.
fn divides(b: f64, a: f64) -> Option<usize> {
    let n = (a / b).round();
    (n >= 1.0 && (n * b - a).abs() <= 1e-9 * a).then_some(n as usize)
}

fn build_grid(g: &GridConfig) -> Result<Grid, ConfigError> {
    if !(1..=2).contains(&g.dim) {
        return Err(ConfigError::at("grid.dim", format!("must be 1 or 2, got {}", g.dim)));
    }
    if g.extent.len() != g.dim {
        return Err(ConfigError::at("grid.extent", format!("needs {} [lo, hi] pairs, got {}", g.dim, g.extent.len())));
    }
    if g.n_cells.len() != g.dim {
        return Err(ConfigError::at("grid.n_cells", format!("needs {} entries, got {}", g.dim, g.n_cells.len())));
    }
    for [lo, hi] in &g.extent {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(ConfigError::at("grid.extent", format!("[{lo}, {hi}] is not a finite interval")));
        }
    }
    if g.n_cells.iter().any(|&n| n < 2) {
        return Err(ConfigError::at("grid.n_cells", "each axis needs at least 2 cells"));
    }
    let built = if g.dim == 1 {
        Grid::interval(g.extent[0][0], g.extent[0][1], g.n_cells[0])
    } else {
        Grid::rectangle(g.extent[0], g.extent[1], [g.n_cells[0], g.n_cells[1]])
    };
    built.map_err(|e| ConfigError::at("grid", e.to_string()))
}

fn check_axis(field: &str, axis: usize, grid: &Grid) -> Result<(), ConfigError> {
    if axis >= grid.dim() {
        return Err(ConfigError::at(field, format!("axis {axis} does not exist on a {}-D grid", grid.dim())));
    }
    Ok(())
}

fn build_initial(init: &InitialConfig, grid: &Grid, base_dir: &Path) -> Result<DensityField, ConfigError> {
    let field = match init {
        InitialConfig::Uniform => return Ok(DensityField::uniform(grid.clone())),
        InitialConfig::Cosine { amplitude, axis } => {
            check_axis("initial.axis", *axis, grid)?;
            if !(amplitude.abs() < 1.0) {
                return Err(ConfigError::at("initial.amplitude", format!("|amplitude| must be below 1, got {amplitude}")));
            }
            let (lo, len, a, ax) = (grid.lo(*axis), grid.width(*axis), *amplitude, *axis);
            DensityField::from_fn(grid.clone(), move |x| 1.0 + a * (PI * (x[ax] - lo) / len).cos(), 0.0)
                .and_then(DensityField::normalized)
        }
        InitialConfig::Csv { path } => {
            let path = base_dir.join(path);
            let file = std::fs::File::open(&path)
                .map_err(|e| ConfigError::at("initial.path", format!("cannot open {}: {e}", path.display())))?;
            let p = DensityField::read_csv(grid.clone(), file, 0.0)
                .map_err(|e| ConfigError::at("initial.path", e.to_string()))?;
            if (p.mass() - 1.0).abs() > 1e-8 {
                return Err(ConfigError::at("initial.path", format!("density integrates to {}, not 1 within 1e-8", p.mass())));
            }
            Ok(p)
        }
    };
    let p = field.map_err(|e| ConfigError::at("initial", e.to_string()))?;
    if p.min() <= 0.0 {
        return Err(ConfigError::at("initial", "density must be strictly positive"));
    }
    Ok(p)
}

fn integer_wavenumber(field: &str, k: f64) -> Result<(), ConfigError> {
    if !(k.is_finite() && k >= 0.0 && k.fract() == 0.0) {
        return Err(ConfigError::at(
            field,
            format!("wavenumber {k} must be a nonnegative integer so the potential is flat on the boundary"),
        ));
    }
    Ok(())
}

fn build_perturbation(cfg: &PerturbationConfig, grid: &Grid) -> Result<Option<PerturbationPotential>, ConfigError> {
    let beta = match cfg {
        PerturbationConfig::None => return Ok(None),
        PerturbationConfig::Cosine { k, amplitude, axis } => {
            check_axis("perturbation.axis", *axis, grid)?;
            integer_wavenumber("perturbation.k", *k)?;
            if !amplitude.is_finite() {
                return Err(ConfigError::at("perturbation.amplitude", "must be finite"));
            }
            PerturbationPotential::cosine(grid, *axis, *k, *amplitude)
        }
        PerturbationConfig::Custom { modes, axis } => {
            check_axis("perturbation.axis", *axis, grid)?;
            if modes.is_empty() {
                return Err(ConfigError::at("perturbation.modes", "needs at least one [k, amplitude] pair"));
            }
            for [k, a] in modes {
                integer_wavenumber("perturbation.modes", *k)?;
                if !a.is_finite() {
                    return Err(ConfigError::at("perturbation.modes", "amplitudes must be finite"));
                }
            }
            PerturbationPotential::cosine_series(grid, *axis, modes.iter().map(|[k, a]| (*k, *a)).collect())
        }
    };
    beta.validate_boundary(grid).map_err(|e| ConfigError::at("perturbation", e.to_string()))?;
    Ok(Some(beta))
}

fn build(cfg: &ExperimentConfig, base_dir: &Path) -> Result<Experiment, ConfigError> {
    let grid = build_grid(&cfg.grid)?;
    let nl = Nonlinearity::from_spec(cfg.nonlinearity).map_err(|e| ConfigError::at("nonlinearity", e.to_string()))?;
    let p0 = build_initial(&cfg.initial, &grid, base_dir)?;
    let beta = build_perturbation(&cfg.perturbation, &grid)?;

    let t_end = positive("time.t_end", cfg.time.t_end)?;
    let spacing = match (cfg.time.snapshot_every, &cfg.particles) {
        (Some(s), _) => positive("time.snapshot_every", s)?,
        (None, Some(p)) => positive("particles.dt", p.dt)?,
        (None, None) => t_end / 100.0,
    };
    if divides(spacing, t_end).is_none() {
        return Err(ConfigError::at("time.snapshot_every", format!("spacing {spacing} does not divide t_end = {t_end}")));
    }
    let (dt, dt_perturbed) = match &cfg.time.dt {
        DtPolicy::Named(s) if s == "cfl" => {
            let dt = cfl_dt_dividing(&p0, &nl, None, spacing).0;
            let dtp = beta.as_ref().map_or(dt, |b| cfl_dt_dividing(&p0, &nl, Some(b), spacing).0);
            (dt, dtp)
        }
        DtPolicy::Named(s) => {
            return Err(ConfigError::at("time.dt", format!("expected a number or \"cfl\", got {s:?}")));
        }
        DtPolicy::Fixed(dt) => {
            let dt = positive("time.dt", *dt)?;
            let mut limit = cfl_dt(&p0, &nl) / CFL_SAFETY;
            if let Some(b) = &beta {
                limit = limit.min(drift_cfl_dt(&grid, b));
            }
            if dt > limit {
                return Err(ConfigError::at("time.dt", format!("dt {dt} exceeds the stability limit {limit:e}")));
            }
            if divides(dt, spacing).is_none() {
                return Err(ConfigError::at("time.dt", format!("dt {dt} does not divide the snapshot spacing {spacing}")));
            }
            (dt, dt)
        }
    };

    if let Some(p) = &cfg.particles {
        if p.count == 0 {
            return Err(ConfigError::at("particles.count", "must be positive"));
        }
        let pdt = positive("particles.dt", p.dt)?;
        if divides(pdt, spacing).is_none() {
            return Err(ConfigError::at("particles.dt", format!("dt {pdt} does not divide the snapshot spacing {spacing}")));
        }
        if p.record_stride == 0 || p.hist_bins == 0 {
            return Err(ConfigError::at("particles", "record_stride and hist_bins must be positive"));
        }
    }
    let s = &cfg.slopes;
    if !(s.t0 >= 0.0 && s.t0 < t_end) || (s.t0 > 0.0 && divides(spacing, s.t0).is_none()) {
        return Err(ConfigError::at("slopes.t0", format!("must be a snapshot time in [0, {t_end}), got {}", s.t0)));
    }
    if s.fd_steps == 0 {
        return Err(ConfigError::at("slopes.fd_steps", "must be at least 1"));
    }
    if s.ladder.len() < 2 || s.ladder.contains(&0) {
        return Err(ConfigError::at("slopes.ladder", "needs at least two positive spacings"));
    }
    if cfg.output.snapshot_stride == 0 {
        return Err(ConfigError::at("output.snapshot_stride", "must be positive"));
    }
    let seed = cfg.particles.as_ref().map_or(0, |p| p.seed);
    Ok(Experiment { config: cfg.clone(), grid, nl, p0, beta, spacing, dt, dt_perturbed, seed })
}

impl Experiment {
    /// Overrides every seed in the experiment.
    pub fn with_seed(mut self, seed: u64) -> Self {
        if let Some(p) = &mut self.config.particles {
            p.seed = seed;
        }
        self.seed = seed;
        self
    }
}
