//! The `gatelab` command line: configuration parsing, crystal caching and
//! table output for each subcommand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::constants::{angular_to_mhz, mhz_to_angular, BERYLLIUM_9_MASS, ELEMENTARY_CHARGE};
use crate::crystal::{
    closed_shell_series, omega_r_from_u_min, seed_spacing, solve_equilibrium, Crystal, Occupation, SolverOptions,
    TrapConfig,
};
use crate::dynamics::{gate_report, normalized_couplings, PulseSchedule};
use crate::fit::fit_power_law;
use crate::modes::{axial_spectrum, build_matrices, com_gap, critical_beta, AxialSpectrum};
use crate::optimizer::{default_pairs, detuning_scan, linear_grid, OptimizationProblem};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Solve (or load) the crystal and write its positions.
    Equilibrium,
    /// Minimum-spacing scan, its power law, and ω_r for target spacings.
    Scaling,
    /// Axial spectrum, critical anisotropy series and the COM gap versus β.
    Modes,
    /// Evaluate a pulse schedule.
    Gate,
    /// Detuning scans and the pair fidelity table.
    Optimize,
}

#[derive(Debug, Parser)]
#[command(name = "gatelab", about = "Planar ion crystals and segmented-pulse phase gates")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Directory for cached crystals; caching is off when omitted.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Overrides the configured solver seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Schedule file for `gate`, as written by `optimize`.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
}

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const UNSTABLE: i32 = 4;
}

/// Exit code for an error.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::InvalidConfig(_)
        | Error::Parse { .. }
        | Error::Io(_)
        | Error::InvalidSchedule(_)
        | Error::NegativeOccupation(_)
        | Error::DegenerateSeed(..) => exit::CONFIG,
        Error::UnstableSpectrum(_) => exit::UNSTABLE,
        _ => exit::NUMERICAL,
    }
}

/// Everything a run can be configured with.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub ion_count: usize,
    pub omega_r_mhz: f64,
    pub omega_z_mhz: f64,
    pub ion_mass_kg: f64,
    pub charge_c: f64,
    pub nbar: Vec<f64>,
    pub solver_tolerance: f64,
    pub solver_max_iterations: usize,
    pub solver_restarts: usize,
    pub solver_jitter: f64,
    pub seed: u64,
    pub scaling_sizes: Vec<usize>,
    pub spacing_targets_um: Vec<f64>,
    pub critical_sizes: Vec<usize>,
    pub gap_ion_count: usize,
    /// Anisotropies for the gap table, as multiples of the critical value.
    pub gap_beta_factors: Vec<f64>,
    pub tau_us: f64,
    pub segments: usize,
    /// Explicit pairs; empty selects [`default_pairs`].
    pub pairs: Vec<(usize, usize)>,
    pub pair_count: usize,
    pub mu_min_mhz: Option<f64>,
    pub mu_max_mhz: Option<f64>,
    pub mu_points: usize,
    pub amplitude_bound_mhz: Option<f64>,
    /// Radial frequencies for the pair table; empty uses `omega_r_mhz`.
    pub table_omega_r_mhz: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            ion_count: 127,
            omega_r_mhz: 0.2,
            omega_z_mhz: 10.0,
            ion_mass_kg: BERYLLIUM_9_MASS,
            charge_c: ELEMENTARY_CHARGE,
            nbar: vec![0.1],
            solver_tolerance: 1e-10,
            solver_max_iterations: 10_000,
            solver_restarts: 5,
            solver_jitter: 0.01,
            seed: 0,
            scaling_sizes: closed_shell_series(8),
            spacing_targets_um: vec![5.0, 20.0],
            critical_sizes: closed_shell_series(6),
            gap_ion_count: 19,
            gap_beta_factors: vec![1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0],
            tau_us: 50.0,
            segments: 5,
            pairs: Vec::new(),
            pair_count: 10,
            mu_min_mhz: None,
            mu_max_mhz: None,
            mu_points: 301,
            amplitude_bound_mhz: None,
            table_omega_r_mhz: Vec::new(),
        }
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_value<T: std::str::FromStr>(text: &str, line: usize, key: &str) -> Result<T> {
    text.parse()
        .map_err(|_| parse_err(line, format!("invalid value {text:?} for {key}")))
}

fn parse_list<T: std::str::FromStr>(text: &str, line: usize, key: &str) -> Result<Vec<T>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',').map(|s| parse_value(s.trim(), line, key)).collect()
}

fn positive(value: f64, line: usize, key: &str) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(parse_err(line, format!("{key} must be positive, got {value}")))
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown or repeated
    /// keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (index, raw) in text.lines().enumerate() {
            let line = index + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| parse_err(line, format!("expected key = value, got {content:?}")))?;
            let key = key.trim();
            let value = value.trim();
            if let Some(prev) = seen.insert(key.to_string(), line) {
                return Err(parse_err(line, format!("{key} already set on line {prev}")));
            }
            match key {
                "ion_count" => c.ion_count = parse_value(value, line, key)?,
                "omega_r_mhz" => c.omega_r_mhz = positive(parse_value(value, line, key)?, line, key)?,
                "omega_z_mhz" => c.omega_z_mhz = positive(parse_value(value, line, key)?, line, key)?,
                "ion_mass_kg" => c.ion_mass_kg = positive(parse_value(value, line, key)?, line, key)?,
                "charge_c" => c.charge_c = positive(parse_value(value, line, key)?, line, key)?,
                "nbar" => {
                    c.nbar = parse_list(value, line, key)?;
                    if c.nbar.is_empty() || c.nbar.iter().any(|n: &f64| !(*n >= 0.0)) {
                        return Err(parse_err(line, "nbar must be one or more non-negative values"));
                    }
                }
                "solver_tolerance" => c.solver_tolerance = positive(parse_value(value, line, key)?, line, key)?,
                "solver_max_iterations" => c.solver_max_iterations = parse_value(value, line, key)?,
                "solver_restarts" => c.solver_restarts = parse_value(value, line, key)?,
                "solver_jitter" => {
                    c.solver_jitter = parse_value(value, line, key)?;
                    if !(c.solver_jitter >= 0.0) {
                        return Err(parse_err(line, "solver_jitter must be non-negative"));
                    }
                }
                "seed" => c.seed = parse_value(value, line, key)?,
                "scaling_sizes" => c.scaling_sizes = parse_list(value, line, key)?,
                "spacing_targets_um" => {
                    c.spacing_targets_um = parse_list(value, line, key)?;
                    for v in &c.spacing_targets_um {
                        positive(*v, line, key)?;
                    }
                }
                "critical_sizes" => c.critical_sizes = parse_list(value, line, key)?,
                "gap_ion_count" => c.gap_ion_count = parse_value(value, line, key)?,
                "gap_beta_factors" => {
                    c.gap_beta_factors = parse_list(value, line, key)?;
                    for v in &c.gap_beta_factors {
                        positive(*v, line, key)?;
                    }
                }
                "tau_us" => c.tau_us = positive(parse_value(value, line, key)?, line, key)?,
                "segments" => c.segments = parse_value(value, line, key)?,
                "pairs" => {
                    c.pairs = if value == "auto" {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|p| {
                                let (a, b) = p
                                    .trim()
                                    .split_once('-')
                                    .ok_or_else(|| parse_err(line, format!("pair {p:?} is not of the form l-n")))?;
                                Ok((parse_value(a.trim(), line, key)?, parse_value(b.trim(), line, key)?))
                            })
                            .collect::<Result<_>>()?
                    }
                }
                "pair_count" => c.pair_count = parse_value(value, line, key)?,
                "mu_min_mhz" => c.mu_min_mhz = Some(positive(parse_value(value, line, key)?, line, key)?),
                "mu_max_mhz" => c.mu_max_mhz = Some(positive(parse_value(value, line, key)?, line, key)?),
                "mu_points" => c.mu_points = parse_value(value, line, key)?,
                "amplitude_bound_mhz" => {
                    c.amplitude_bound_mhz = Some(positive(parse_value(value, line, key)?, line, key)?)
                }
                "table_omega_r_mhz" => {
                    c.table_omega_r_mhz = parse_list(value, line, key)?;
                    for v in &c.table_omega_r_mhz {
                        positive(*v, line, key)?;
                    }
                }
                _ => return Err(parse_err(line, format!("unknown key {key:?}"))),
            }
        }
        if c.ion_count == 0 {
            return Err(Error::InvalidConfig("ion_count must be at least 1".into()));
        }
        if c.segments == 0 {
            return Err(Error::InvalidConfig("segments must be at least 1".into()));
        }
        if c.nbar.len() != 1 && c.nbar.len() != c.ion_count {
            return Err(Error::InvalidConfig(format!(
                "nbar needs 1 or {} values, got {}",
                c.ion_count,
                c.nbar.len()
            )));
        }
        Ok(c)
    }

    pub fn trap(&self) -> Result<TrapConfig> {
        self.trap_with(self.ion_count, self.omega_r_mhz)
    }

    fn trap_with(&self, ion_count: usize, omega_r_mhz: f64) -> Result<TrapConfig> {
        let nbar = if self.nbar.len() == 1 {
            Occupation::Uniform(self.nbar[0])
        } else {
            Occupation::PerMode(self.nbar.clone())
        };
        let trap = TrapConfig {
            ion_count,
            omega_r: mhz_to_angular(omega_r_mhz),
            omega_z: mhz_to_angular(self.omega_z_mhz),
            ion_mass: self.ion_mass_kg,
            charge: self.charge_c,
            nbar: if ion_count == self.ion_count { nbar } else { Occupation::Uniform(self.nbar[0]) },
        };
        trap.validate()?;
        Ok(trap)
    }

    pub fn solver(&self) -> SolverOptions {
        SolverOptions {
            tolerance: self.solver_tolerance,
            max_iterations: self.solver_max_iterations,
            restarts: self.solver_restarts,
            seed: self.seed,
            jitter: self.solver_jitter,
        }
    }

    /// Detuning grid in rad/s.
    pub fn mu_grid(&self) -> Vec<f64> {
        let lo = self.mu_min_mhz.unwrap_or(self.omega_z_mhz - 0.1);
        let hi = self.mu_max_mhz.unwrap_or(self.omega_z_mhz + 0.2);
        linear_grid(lo, hi, self.mu_points)
    }
}

/// A tab-separated table with `# key = value` metadata lines and a `#`
/// column header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            meta: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn get_meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Values use the shortest representation that parses back exactly.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k} = {v}");
        }
        let _ = writeln!(out, "# {}", self.columns.join("\t"));
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{}", cells.join("\t"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = Vec::new();
        let mut columns: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        for (index, raw) in text.lines().enumerate() {
            let line = index + 1;
            if raw.trim().is_empty() {
                continue;
            }
            if let Some(rest) = raw.strip_prefix("# ") {
                match rest.split_once(" = ") {
                    Some((k, v)) if columns.is_none() => meta.push((k.to_string(), v.to_string())),
                    _ if columns.is_none() => columns = Some(rest.split('\t').map(str::to_string).collect()),
                    _ => return Err(parse_err(line, "metadata after the column header")),
                }
                continue;
            }
            let cols = columns
                .as_ref()
                .ok_or_else(|| parse_err(line, "data row before the column header"))?;
            let row: Vec<f64> = raw
                .split('\t')
                .map(|c| parse_value(c.trim(), line, "cell"))
                .collect::<Result<_>>()?;
            if row.len() != cols.len() {
                return Err(parse_err(line, format!("expected {} columns, got {}", cols.len(), row.len())));
            }
            rows.push(row);
        }
        Ok(Self {
            meta,
            columns: columns.ok_or_else(|| parse_err(0, "missing column header"))?,
            rows,
        })
    }
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes a schedule as a [`Table`] readable by [`read_schedule`].
pub fn schedule_table(schedule: &PulseSchedule) -> Table {
    let mut t = Table::new(&["segment", "omega_rad_s"])
        .meta("pair", format!("{}-{}", schedule.pair.0, schedule.pair.1))
        .meta("tau_s", format!("{:e}", schedule.tau))
        .meta("mu_rad_s", format!("{:e}", schedule.mu));
    for (p, a) in schedule.amplitudes.iter().enumerate() {
        t.push(vec![p as f64, *a]);
    }
    t
}

pub fn read_schedule(text: &str) -> Result<PulseSchedule> {
    let t = Table::parse(text)?;
    let need = |k: &str| t.get_meta(k).ok_or_else(|| parse_err(0, format!("missing {k}")));
    let (a, b) = need("pair")?
        .split_once('-')
        .ok_or_else(|| parse_err(0, "pair must be l-n"))?;
    let pair = (parse_value(a, 0, "pair")?, parse_value(b, 0, "pair")?);
    let tau = parse_value(need("tau_s")?, 0, "tau_s")?;
    let mu = parse_value(need("mu_rad_s")?, 0, "mu_rad_s")?;
    let amplitudes = t.column("omega_rad_s").ok_or_else(|| parse_err(0, "missing omega_rad_s column"))?;
    PulseSchedule::new(tau, amplitudes, mu, pair)
}

/// Content-addressed store for solved crystals.
struct CrystalCache {
    dir: Option<PathBuf>,
}

impl CrystalCache {
    fn key(ion_count: usize, options: &SolverOptions) -> String {
        let text = format!(
            "crystal-v1|{ion_count}|{:e}|{}|{}|{}|{:e}",
            options.tolerance, options.max_iterations, options.restarts, options.seed, options.jitter
        );
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// The dimensionless equilibrium depends only on `N` and the solver, so
    /// a cached one is reused for any trap frequencies.
    fn crystal(&self, trap: &TrapConfig, options: &SolverOptions) -> Result<Crystal> {
        let path = self
            .dir
            .as_ref()
            .map(|d| d.join(format!("crystal-{}.json", Self::key(trap.ion_count, options))));
        if let Some(p) = &path {
            if let Ok(text) = fs::read_to_string(p) {
                if let Ok(positions) = serde_json::from_str::<Vec<[f64; 2]>>(&text) {
                    if positions.len() == trap.ion_count {
                        return Crystal::from_positions(positions, trap.clone());
                    }
                }
            }
        }
        let crystal = solve_equilibrium(trap, None, options)?;
        if let Some(p) = &path {
            let text = serde_json::to_string(&crystal.positions).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            write_atomic(p, &text)?;
        }
        Ok(crystal)
    }
}

/// Distance from each ion to the nearest site of an ideal triangular
/// lattice with the seed constant, the lattice rotated to the best fit.
pub fn lattice_deviation(crystal: &Crystal) -> Vec<f64> {
    let a = seed_spacing(crystal.ion_count());
    let nearest = |p: [f64; 2], angle: f64| {
        let (s, c) = angle.sin_cos();
        let x = (c * p[0] + s * p[1]) / a;
        let y = (-s * p[0] + c * p[1]) / a;
        // Lattice coordinates in the basis (1, 0), (1/2, √3/2).
        let j = y / (3f64.sqrt() / 2.0);
        let i = x - 0.5 * j;
        let mut best = f64::INFINITY;
        for di in [i.floor(), i.ceil()] {
            for dj in [j.floor(), j.ceil()] {
                let sx = di + 0.5 * dj;
                let sy = dj * 3f64.sqrt() / 2.0;
                best = best.min((x - sx).hypot(y - sy));
            }
        }
        best * a
    };
    let steps = 600;
    let sector = std::f64::consts::PI / 3.0;
    let mut best_angle = 0.0;
    let mut best_cost = f64::INFINITY;
    for s in 0..steps {
        let angle = sector * s as f64 / steps as f64;
        let cost: f64 = crystal.positions.iter().map(|p| nearest(*p, angle).powi(2)).sum();
        if cost < best_cost {
            best_cost = cost;
            best_angle = angle;
        }
    }
    crystal.positions.iter().map(|p| nearest(*p, best_angle)).collect()
}

fn to_json(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialize");
    s.push('\n');
    s
}

/// Axial spectrum plus normalized couplings for `crystal`.
fn spectrum_for(crystal: &Crystal) -> Result<(AxialSpectrum, nalgebra::DMatrix<f64>)> {
    let matrices = build_matrices(crystal, crystal.config.beta())?;
    let spectrum = axial_spectrum(&matrices, &crystal.config)?;
    let couplings = normalized_couplings(&spectrum, crystal.config.omega_z)?;
    Ok((spectrum, couplings))
}

struct Context {
    config: RunConfig,
    out: PathBuf,
    cache: CrystalCache,
    schedule: Option<PathBuf>,
}

impl Context {
    fn write(&self, name: &str, contents: &str) -> Result<()> {
        write_atomic(&self.out.join(name), contents)
    }
}

fn cmd_equilibrium(ctx: &Context) -> Result<i32> {
    let trap = ctx.config.trap()?;
    let crystal = ctx.cache.crystal(&trap, &ctx.config.solver())?;
    let deviation = lattice_deviation(&crystal);
    let mut t = Table::new(&["index", "u_x", "u_y", "x_um", "y_um", "lattice_deviation"])
        .meta("ion_count", crystal.ion_count())
        .meta("length_scale_m", format!("{:e}", crystal.length_scale))
        .meta("lattice_constant", format!("{:e}", seed_spacing(crystal.ion_count())));
    for (i, p) in crystal.positions.iter().enumerate() {
        t.push(vec![
            i as f64,
            p[0],
            p[1],
            p[0] * crystal.length_scale * 1e6,
            p[1] * crystal.length_scale * 1e6,
            deviation[i],
        ]);
    }
    ctx.write("crystal.tsv", &crystal.to_table())?;
    ctx.write("positions.tsv", &t.render())?;
    let u_min = if crystal.u_min.is_finite() { json!(crystal.u_min) } else { Value::Null };
    let d_min = if crystal.u_min.is_finite() { json!(crystal.d_min() * 1e6) } else { Value::Null };
    ctx.write(
        "summary.json",
        &to_json(&json!({
            "command": "equilibrium",
            "ion_count": crystal.ion_count(),
            "beta": trap.beta(),
            "length_scale_m": crystal.length_scale,
            "u_min": u_min,
            "d_min_um": d_min,
            "energy": crystal.energy,
            "residual_gradient_norm": crystal.residual_gradient_norm,
        })),
    )?;
    Ok(exit::SUCCESS)
}

fn cmd_scaling(ctx: &Context) -> Result<i32> {
    let c = &ctx.config;
    if c.scaling_sizes.is_empty() {
        return Err(Error::InvalidConfig("scaling_sizes is empty".into()));
    }
    let options = c.solver();
    let mut points = Vec::new();
    for &n in &c.scaling_sizes {
        let crystal = ctx.cache.crystal(&c.trap_with(n, c.omega_r_mhz)?, &options)?;
        points.push((n as f64, crystal.u_min));
    }
    let fit = if points.len() >= 3 { Some(fit_power_law(&points, 0)?) } else { None };
    let mut fig2a = Table::new(&["N", "u_min", "u_min_fit"]);
    for &(n, u) in &points {
        fig2a.push(vec![n, u, fit.map_or(f64::NAN, |f| f.predict(n))]);
    }
    if let Some(f) = fit {
        fig2a = fig2a
            .meta("prefactor", format!("{:e}", f.prefactor))
            .meta("exponent", format!("{:e}", f.exponent))
            .meta("rms_log_residual", format!("{:e}", f.rms_log_residual));
    }
    let mut columns = vec!["N".to_string()];
    columns.extend(c.spacing_targets_um.iter().map(|d| format!("omega_r_mhz_at_{d}um")));
    let column_refs: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut fig2b = Table::new(&column_refs);
    for &(n, u) in &points {
        let mut row = vec![n];
        for d in &c.spacing_targets_um {
            row.push(angular_to_mhz(omega_r_from_u_min(u, d * 1e-6, c.ion_mass_kg, c.charge_c)));
        }
        fig2b.push(row);
    }
    ctx.write("fig2a.tsv", &fig2a.render())?;
    ctx.write("fig2b.tsv", &fig2b.render())?;
    ctx.write(
        "summary.json",
        &to_json(&json!({
            "command": "scaling",
            "sizes": c.scaling_sizes,
            "u_min": points.iter().map(|p| p.1).collect::<Vec<_>>(),
            "fit": fit.map(|f| json!({"prefactor": f.prefactor, "exponent": f.exponent, "rms_log_residual": f.rms_log_residual})),
        })),
    )?;
    Ok(exit::SUCCESS)
}

fn cmd_modes(ctx: &Context) -> Result<i32> {
    let c = &ctx.config;
    let options = c.solver();
    let trap = c.trap()?;
    let crystal = ctx.cache.crystal(&trap, &options)?;
    let matrices = build_matrices(&crystal, trap.beta())?;
    let spectrum = axial_spectrum(&matrices, &trap)?;
    ctx.write("spectrum.tsv", &spectrum.to_table())?;

    let mut criticals = Vec::new();
    for &n in &c.critical_sizes {
        let beta_c = critical_beta(n, |n| ctx.cache.crystal(&c.trap_with(n, c.omega_r_mhz)?, &options))?;
        criticals.push((n as f64, beta_c));
    }
    let fit_points: Vec<(f64, f64)> = criticals.iter().map(|&(n, b)| (n, b * b)).collect();
    let fit = if fit_points.len() >= 3 { Some(fit_power_law(&fit_points, 2)?) } else { None };
    let mut fig3a = Table::new(&["N", "beta_c", "beta_c_sq", "beta_c_sq_fit"]);
    for &(n, b) in &criticals {
        fig3a.push(vec![n, b, b * b, fit.map_or(f64::NAN, |f| f.predict(n))]);
    }
    if let Some(f) = fit {
        fig3a = fig3a
            .meta("prefactor", format!("{:e}", f.prefactor))
            .meta("exponent", format!("{:e}", f.exponent))
            .meta("shift", 2);
    }

    let gap_trap = c.trap_with(c.gap_ion_count, c.omega_r_mhz)?;
    let gap_crystal = ctx.cache.crystal(&gap_trap, &options)?;
    let gap_beta_c = critical_beta(c.gap_ion_count, |_| Ok(gap_crystal.clone()))?;
    let base = build_matrices(&gap_crystal, 1.0)?;
    let mut fig3b = Table::new(&["beta", "beta_over_beta_c", "gap_khz"])
        .meta("ion_count", c.gap_ion_count)
        .meta("omega_r_mhz", c.omega_r_mhz)
        .meta("beta_c", format!("{:e}", gap_beta_c));
    for &factor in &c.gap_beta_factors {
        let beta = factor * gap_beta_c;
        let mut t = gap_trap.clone();
        t.omega_z = beta * t.omega_r;
        let gap = com_gap(&axial_spectrum(&base.with_beta(beta), &t)?)?;
        fig3b.push(vec![beta, factor, angular_to_mhz(gap) * 1e3]);
    }
    ctx.write("fig3a.tsv", &fig3a.render())?;
    ctx.write("fig3b.tsv", &fig3b.render())?;
    ctx.write(
        "summary.json",
        &to_json(&json!({
            "command": "modes",
            "ion_count": crystal.ion_count(),
            "beta": trap.beta(),
            "stable": spectrum.stable,
            "min_eigenvalue": spectrum.min_eigenvalue(),
            "critical_beta": criticals.iter().map(|c| json!({"N": c.0, "beta_c": c.1})).collect::<Vec<_>>(),
            "critical_fit": fit.map(|f| json!({"a": f.prefactor, "b": f.exponent})),
        })),
    )?;
    Ok(if spectrum.stable { exit::SUCCESS } else { exit::UNSTABLE })
}

fn cmd_gate(ctx: &Context) -> Result<i32> {
    let c = &ctx.config;
    let path = ctx
        .schedule
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("gate needs --schedule".into()))?;
    let schedule = read_schedule(&fs::read_to_string(path)?)?;
    let trap = c.trap()?;
    let crystal = ctx.cache.crystal(&trap, &c.solver())?;
    let (spectrum, couplings) = spectrum_for(&crystal)?;
    let nbar = trap.nbar.expand(spectrum.mode_count());
    let report = gate_report(&schedule, &spectrum, &couplings, &nbar, Some(&crystal))?;

    let mut modes = Table::new(&["k", "freq_mhz", "abs_alpha_l", "abs_alpha_n"])
        .meta("fidelity", format!("{:e}", report.fidelity))
        .meta("phi_ln", format!("{:e}", report.phi_ln));
    for (k, (al, an)) in report.alpha_abs.iter().enumerate() {
        modes.push(vec![k as f64, angular_to_mhz(spectrum.omega[k]), *al, *an]);
    }
    let response = report.response.as_ref().expect("crystal was supplied");
    let (l, n) = schedule.pair;
    let mut resp = Table::new(&["index", "u_x", "u_y", "target_distance", "peak_nm", "normalized"])
        .meta("pair", format!("{l}-{n}"));
    for (j, p) in crystal.positions.iter().enumerate() {
        let d = crystal.distance(j, l).min(crystal.distance(j, n));
        resp.push(vec![j as f64, p[0], p[1], d, response.peak[j] * 1e9, response.normalized[j]]);
    }
    ctx.write("gate_modes.tsv", &modes.render())?;
    ctx.write("response.tsv", &resp.render())?;
    ctx.write(
        "summary.json",
        &to_json(&json!({
            "command": "gate",
            "pair": [l, n],
            "fidelity": report.fidelity,
            "phi_ln": report.phi_ln,
            "tau_s": schedule.tau,
            "mu_mhz": angular_to_mhz(schedule.mu),
            "omega_mhz": schedule.amplitudes.iter().map(|a| angular_to_mhz(*a)).collect::<Vec<_>>(),
        })),
    )?;
    Ok(exit::SUCCESS)
}

fn cmd_optimize(ctx: &Context) -> Result<i32> {
    let c = &ctx.config;
    let options = c.solver();
    let base = ctx.cache.crystal(&c.trap()?, &options)?;
    let radial = if c.table_omega_r_mhz.is_empty() {
        vec![c.omega_r_mhz]
    } else {
        c.table_omega_r_mhz.clone()
    };
    let pairs = if c.pairs.is_empty() {
        default_pairs(&base, c.pair_count)
    } else {
        c.pairs.clone()
    };
    let grid = c.mu_grid();
    let mut summary_tables = Vec::new();
    for &wr in &radial {
        let tag = format!("wr{wr}");
        let crystal = base.with_config(c.trap_with(c.ion_count, wr)?)?;
        let (spectrum, couplings) = spectrum_for(&crystal)?;
        let nbar = crystal.config.nbar.expand(spectrum.mode_count());
        let mut table = Table::new(&["rank", "l", "n", "distance_um", "fidelity", "mu_mhz", "omega_max_mhz"])
            .meta("omega_r_mhz", wr)
            .meta("omega_z_mhz", c.omega_z_mhz)
            .meta("tau_us", c.tau_us)
            .meta("segments", c.segments);
        let mut rows = Vec::new();
        for (rank, &pair) in pairs.iter().enumerate() {
            let problem = OptimizationProblem {
                pair,
                tau: c.tau_us * 1e-6,
                segments: c.segments,
                mu_grid: grid.clone(),
                amplitude_bound: c.amplitude_bound_mhz.map(mhz_to_angular),
                nbar: nbar.clone(),
            };
            let result = detuning_scan(&problem, &spectrum, &couplings)?;
            let mut curve = Table::new(&["mu_mhz", "fidelity", "omega_max_mhz", "feasible"])
                .meta("pair", format!("{}-{}", pair.0, pair.1))
                .meta("omega_r_mhz", wr);
            for p in &result.curve {
                curve.push(vec![
                    angular_to_mhz(p.mu),
                    p.fidelity,
                    angular_to_mhz(p.omega_max),
                    if p.feasible { 1.0 } else { 0.0 },
                ]);
            }
            let distance = crystal.distance(pair.0, pair.1) * crystal.length_scale * 1e6;
            table.push(vec![
                (rank + 1) as f64,
                pair.0 as f64,
                pair.1 as f64,
                distance,
                result.fidelity,
                angular_to_mhz(result.best.mu),
                angular_to_mhz(result.best.omega_max()),
            ]);
            rows.push(json!({
                "rank": rank + 1,
                "pair": [pair.0, pair.1],
                "distance_um": distance,
                "fidelity": result.fidelity,
                "phi_ln": result.phi_ln,
                "mu_mhz": angular_to_mhz(result.best.mu),
                "omega_max_mhz": angular_to_mhz(result.best.omega_max()),
            }));
            ctx.write(&format!("fig5_{tag}_pair{}.tsv", rank + 1), &curve.render())?;
            ctx.write(&format!("schedule_{tag}_pair{}.tsv", rank + 1), &schedule_table(&result.best).render())?;
        }
        ctx.write(&format!("table1_{tag}.tsv"), &table.render())?;
        summary_tables.push(json!({"omega_r_mhz": wr, "rows": rows}));
    }
    ctx.write(
        "summary.json",
        &to_json(&json!({
            "command": "optimize",
            "tau_us": c.tau_us,
            "segments": c.segments,
            "grid_points": grid.len(),
            "tables": summary_tables,
        })),
    )?;
    Ok(exit::SUCCESS)
}

/// Runs one parsed invocation and returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    let text = fs::read_to_string(&cli.config)?;
    let mut config = RunConfig::parse(&text)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let ctx = Context {
        config,
        out: cli.out.clone(),
        cache: CrystalCache { dir: cli.cache.clone() },
        schedule: cli.schedule.clone(),
    };
    match cli.command {
        Command::Equilibrium => cmd_equilibrium(&ctx),
        Command::Scaling => cmd_scaling(&ctx),
        Command::Modes => cmd_modes(&ctx),
        Command::Gate => cmd_gate(&ctx),
        Command::Optimize => cmd_optimize(&ctx),
    }
}

/// Entry point shared by the binary: parses `args`, runs, and reports
/// errors on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("gatelab: {e}");
            exit_code(&e)
        }
    }
}
