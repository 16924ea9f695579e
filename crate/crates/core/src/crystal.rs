//! Equilibrium positions of a planar Coulomb crystal.
//!
//! Positions are dimensionless, in units of the length scale
//! `ℓ = (e² / 4πε₀ M ω_r²)^{1/3}`. In these units the in-plane potential is
//!
//! ```text
//! E(u) = ½ Σ_m |u_m|² + Σ_{m<n} 1 / |u_m − u_n|
//! ```
//!
//! and its stationary points are independent of the axial frequency.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::constants::{coulomb_constant, BERYLLIUM_9_MASS, ELEMENTARY_CHARGE};
use crate::modes::coupling_from_positions;
use crate::{Error, Result};

/// Mean thermal phonon number of the axial modes.
#[derive(Debug, Clone, PartialEq)]
pub enum Occupation {
    Uniform(f64),
    PerMode(Vec<f64>),
}

impl Occupation {
    pub fn for_mode(&self, k: usize) -> f64 {
        match self {
            Occupation::Uniform(n) => *n,
            Occupation::PerMode(v) => v[k],
        }
    }

    /// Expands to one value per mode.
    pub fn expand(&self, modes: usize) -> Vec<f64> {
        (0..modes).map(|k| self.for_mode(k)).collect()
    }

    fn validate(&self, ion_count: usize) -> Result<()> {
        let values: &[f64] = match self {
            Occupation::Uniform(n) => std::slice::from_ref(n),
            Occupation::PerMode(v) => {
                if v.len() != ion_count {
                    return Err(Error::InvalidConfig(format!(
                        "expected {ion_count} per-mode occupations, got {}",
                        v.len()
                    )));
                }
                v
            }
        };
        match values.iter().find(|n| !(n.is_finite() && **n >= 0.0)) {
            Some(n) => Err(Error::NegativeOccupation(*n)),
            None => Ok(()),
        }
    }
}

/// Physical trap and ion parameters. Frequencies are angular, in rad/s.
#[derive(Debug, Clone, PartialEq)]
pub struct TrapConfig {
    pub ion_count: usize,
    pub omega_r: f64,
    pub omega_z: f64,
    pub ion_mass: f64,
    pub charge: f64,
    pub nbar: Occupation,
}

impl TrapConfig {
    /// ⁹Be⁺ ions with unit charge and `n̄ = 0.1` in every mode.
    pub fn new(ion_count: usize, omega_r: f64, omega_z: f64) -> Result<Self> {
        let config = Self {
            ion_count,
            omega_r,
            omega_z,
            ion_mass: BERYLLIUM_9_MASS,
            charge: ELEMENTARY_CHARGE,
            nbar: Occupation::Uniform(0.1),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        if self.ion_count == 0 {
            return Err(Error::InvalidConfig("ion_count must be at least 1".into()));
        }
        positive("omega_r", self.omega_r)?;
        positive("omega_z", self.omega_z)?;
        positive("ion_mass", self.ion_mass)?;
        positive("charge", self.charge.abs())?;
        self.nbar.validate(self.ion_count)
    }

    /// Trap anisotropy `ω_z / ω_r`.
    pub fn beta(&self) -> f64 {
        self.omega_z / self.omega_r
    }

    /// Length scale `ℓ` in meters.
    pub fn length_scale(&self) -> f64 {
        length_scale(self.omega_r, self.ion_mass, self.charge)
    }
}

/// `ℓ = (e² / 4πε₀ M ω_r²)^{1/3}` in meters.
pub fn length_scale(omega_r: f64, ion_mass: f64, charge: f64) -> f64 {
    (coulomb_constant(charge) / (ion_mass * omega_r * omega_r)).cbrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Convergence threshold on the largest gradient component.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub restarts: usize,
    /// Seed for the lattice jitter of the restarts.
    pub seed: u64,
    /// Jitter amplitude as a fraction of the seed lattice constant.
    pub jitter: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 10_000,
            restarts: 5,
            seed: 0,
            jitter: 0.01,
        }
    }
}

/// A converged planar equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct Crystal {
    pub positions: Vec<[f64; 2]>,
    pub length_scale: f64,
    pub residual_gradient_norm: f64,
    pub u_min: f64,
    pub energy: f64,
    pub config: TrapConfig,
}

impl Crystal {
    /// Builds a crystal from known positions without solving.
    pub fn from_positions(positions: Vec<[f64; 2]>, config: TrapConfig) -> Result<Self> {
        config.validate()?;
        if positions.len() != config.ion_count {
            return Err(Error::InvalidConfig(format!(
                "{} positions for {} ions",
                positions.len(),
                config.ion_count
            )));
        }
        let residual_gradient_norm = max_abs(&gradient(&positions));
        Ok(Self {
            u_min: min_spacing(&positions),
            energy: potential_energy(&positions),
            length_scale: config.length_scale(),
            residual_gradient_norm,
            positions,
            config,
        })
    }

    pub fn ion_count(&self) -> usize {
        self.positions.len()
    }

    /// Minimum ion separation in meters.
    pub fn d_min(&self) -> f64 {
        self.u_min * self.length_scale
    }

    /// Same equilibrium expressed for another trap (dimensionless positions
    /// do not depend on the frequencies).
    pub fn with_config(&self, config: TrapConfig) -> Result<Self> {
        if config.ion_count != self.ion_count() {
            return Err(Error::InvalidConfig("ion count mismatch".into()));
        }
        config.validate()?;
        Ok(Self {
            length_scale: config.length_scale(),
            config,
            ..self.clone()
        })
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        dist(self.positions[i], self.positions[j])
    }

    /// Tab-separated table: a `#` header carrying the trap fields followed by
    /// one `index u_x u_y` row per ion in shortest round-trip form.
    pub fn to_table(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(out, "# ion_count = {}", c.ion_count);
        let _ = writeln!(out, "# omega_r = {:e}", c.omega_r);
        let _ = writeln!(out, "# omega_z = {:e}", c.omega_z);
        let _ = writeln!(out, "# ion_mass = {:e}", c.ion_mass);
        let _ = writeln!(out, "# charge = {:e}", c.charge);
        match &c.nbar {
            Occupation::Uniform(n) => {
                let _ = writeln!(out, "# nbar = {n:e}");
            }
            Occupation::PerMode(v) => {
                let list: Vec<String> = v.iter().map(|n| format!("{n:e}")).collect();
                let _ = writeln!(out, "# nbar = {}", list.join(","));
            }
        }
        // Derived values, informational only.
        let _ = writeln!(out, "# beta = {:e}", c.beta());
        let _ = writeln!(out, "# length_scale_m = {:e}", self.length_scale);
        let _ = writeln!(out, "# u_min = {:e}", self.u_min);
        let _ = writeln!(out, "# index\tu_x\tu_y");
        for (i, p) in self.positions.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{:e}\t{:e}", p[0], p[1]);
        }
        out
    }

    /// Parses the output of [`Crystal::to_table`].
    pub fn from_table(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        let mut positions = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let line_no = lineno + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                if let Some((k, v)) = header.split_once('=') {
                    fields.insert(k.trim().to_string(), (line_no, v.trim().to_string()));
                }
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(parse_err(line_no, "expected 3 tab-separated columns"));
            }
            let index: usize = cols[0]
                .parse()
                .map_err(|_| parse_err(line_no, "bad ion index"))?;
            if index != positions.len() {
                return Err(parse_err(line_no, "ion indices must be consecutive"));
            }
            let x = parse_f64(cols[1], line_no)?;
            let y = parse_f64(cols[2], line_no)?;
            positions.push([x, y]);
        }
        let get = |key: &str| -> Result<(usize, String)> {
            fields
                .get(key)
                .cloned()
                .ok_or_else(|| parse_err(0, &format!("missing header field {key}")))
        };
        let num = |key: &str| -> Result<f64> {
            let (line, v) = get(key)?;
            parse_f64(&v, line)
        };
        let (line, n) = get("ion_count")?;
        let ion_count: usize = n.parse().map_err(|_| parse_err(line, "bad ion_count"))?;
        let (nline, nbar_text) = get("nbar")?;
        let nbar_values = nbar_text
            .split(',')
            .map(|s| parse_f64(s.trim(), nline))
            .collect::<Result<Vec<_>>>()?;
        let nbar = if nbar_values.len() == 1 {
            Occupation::Uniform(nbar_values[0])
        } else {
            Occupation::PerMode(nbar_values)
        };
        let config = TrapConfig {
            ion_count,
            omega_r: num("omega_r")?,
            omega_z: num("omega_z")?,
            ion_mass: num("ion_mass")?,
            charge: num("charge")?,
            nbar,
        };
        Crystal::from_positions(positions, config)
    }
}

fn parse_err(line: usize, message: &str) -> Error {
    Error::Parse {
        line,
        message: message.to_string(),
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.parse()
        .map_err(|_| parse_err(line, &format!("invalid number {s:?}")))
}

#[inline]
pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Smallest pairwise distance; `+∞` for a single ion.
pub fn min_spacing(positions: &[[f64; 2]]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            best = best.min(dist(positions[i], positions[j]));
        }
    }
    best
}

/// Dimensionless potential energy of a planar configuration.
pub fn potential_energy(positions: &[[f64; 2]]) -> f64 {
    let mut e = 0.0;
    for (i, p) in positions.iter().enumerate() {
        e += 0.5 * (p[0] * p[0] + p[1] * p[1]);
        for q in &positions[i + 1..] {
            e += 1.0 / dist(*p, *q);
        }
    }
    e
}

/// Left-hand sides of the in-plane equilibrium equations, interleaved as
/// `[x_0, y_0, x_1, y_1, …]`.
pub fn gradient(positions: &[[f64; 2]]) -> Vec<f64> {
    let n = positions.len();
    let mut g = vec![0.0; 2 * n];
    for m in 0..n {
        g[2 * m] += positions[m][0];
        g[2 * m + 1] += positions[m][1];
        for p in m + 1..n {
            let dx = positions[m][0] - positions[p][0];
            let dy = positions[m][1] - positions[p][1];
            let r2 = dx * dx + dy * dy;
            let inv3 = 1.0 / (r2 * r2.sqrt());
            g[2 * m] -= dx * inv3;
            g[2 * m + 1] -= dy * inv3;
            g[2 * p] += dx * inv3;
            g[2 * p + 1] += dy * inv3;
        }
    }
    g
}

fn interleaved_hessian(positions: &[[f64; 2]]) -> Result<DMatrix<f64>> {
    // β only affects the axial block, which the in-plane solve ignores.
    let a = coupling_from_positions(positions, 1.0)?;
    let n = positions.len();
    Ok(DMatrix::from_fn(2 * n, 2 * n, |r, c| {
        let (i, j) = (r / 2, c / 2);
        match (r % 2, c % 2) {
            (0, 0) => a.axx[(i, j)],
            (1, 1) => a.ayy[(i, j)],
            _ => a.axy[(i, j)],
        }
    }))
}

/// The `N` sites of an ideal triangular lattice closest to the origin.
pub fn triangular_lattice(n: usize, spacing: f64) -> Vec<[f64; 2]> {
    let span = (n as f64).sqrt().ceil() as i64 + 2;
    let mut sites = Vec::new();
    for l in -span..=span {
        for j in -2 * span..=2 * span {
            let x = (j as f64 + l as f64 / 2.0) * spacing;
            let y = 3f64.sqrt() * l as f64 * spacing / 2.0;
            sites.push([x, y]);
        }
    }
    sort_by_shell(&mut sites);
    sites.truncate(n);
    sites
}

/// Orders points by radius, then by polar angle within a shell.
fn sort_by_shell(points: &mut [[f64; 2]]) {
    let angle = |p: &[f64; 2]| {
        let a = p[1].atan2(p[0]);
        let a = if a < 0.0 { a + 2.0 * PI } else { a };
        if 2.0 * PI - a < 1e-9 {
            0.0
        } else {
            a
        }
    };
    points.sort_by(|a, b| {
        let ra = a[0].hypot(a[1]);
        let rb = b[0].hypot(b[1]);
        if (ra - rb).abs() > 1e-7 * ra.max(rb).max(1.0) {
            ra.total_cmp(&rb)
        } else {
            angle(a).total_cmp(&angle(b))
        }
    });
}

/// Lattice constant suggested by the empirical `u_min` scaling law.
pub fn seed_spacing(n: usize) -> f64 {
    1.995 / (n as f64).powf(0.172)
}

fn check_seed(seed: &[[f64; 2]]) -> Result<()> {
    for i in 0..seed.len() {
        for j in i + 1..seed.len() {
            if dist(seed[i], seed[j]) < 1e-9 {
                return Err(Error::DegenerateSeed(i, j));
            }
        }
    }
    Ok(())
}

/// Finds the planar equilibrium with the lowest energy among jittered
/// triangular-lattice restarts (or among jittered copies of `seed`).
pub fn solve_equilibrium(
    config: &TrapConfig,
    seed: Option<&[[f64; 2]]>,
    options: &SolverOptions,
) -> Result<Crystal> {
    config.validate()?;
    let n = config.ion_count;
    if let Some(s) = seed {
        if s.len() != n {
            return Err(Error::InvalidConfig(format!(
                "seed has {} positions for {n} ions",
                s.len()
            )));
        }
        check_seed(s)?;
    }
    if n == 1 {
        return Crystal::from_positions(vec![[0.0, 0.0]], config.clone());
    }

    let base: Vec<[f64; 2]> = match seed {
        Some(s) => s.to_vec(),
        None => triangular_lattice(n, seed_spacing(n)),
    };
    let scale = match seed {
        Some(s) => min_spacing(s),
        None => seed_spacing(n),
    };

    let restarts = options.restarts.max(1);
    let runs: Vec<Result<Relaxed>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(r as u64);
            let amp = options.jitter * scale;
            let start: Vec<[f64; 2]> = base
                .iter()
                .map(|p| {
                    [
                        p[0] + amp * rng.gen_range(-1.0..=1.0),
                        p[1] + amp * rng.gen_range(-1.0..=1.0),
                    ]
                })
                .collect();
            check_seed(&start)?;
            relax(start, options)
        })
        .collect();

    let mut best: Option<Relaxed> = None;
    let mut first_err = None;
    for run in runs {
        match run {
            Ok(candidate) => {
                let better = match &best {
                    None => true,
                    Some(b) => candidate.1 < b.1 - 1e-12 * b.1.abs(),
                };
                if better {
                    best = Some(candidate);
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    let (positions, _, _) = match best {
        Some(b) => b,
        None => return Err(first_err.unwrap_or(Error::NonConvergence { iterations: 0, residual: f64::NAN })),
    };
    let positions = canonicalize(positions);
    let crystal = Crystal::from_positions(positions, config.clone())?;
    if crystal.residual_gradient_norm >= options.tolerance {
        // Recentering and rotation can cost a few ulps; one more pass fixes it.
        let (p, _, _) = relax(crystal.positions.clone(), options)?;
        return Crystal::from_positions(canonicalize(p), config.clone());
    }
    Ok(crystal)
}

/// Positions, energy and final max-gradient of one relaxation.
type Relaxed = (Vec<[f64; 2]>, f64, f64);

/// Damped Newton (Levenberg–Marquardt) descent on the in-plane energy.
fn relax(mut x: Vec<[f64; 2]>, options: &SolverOptions) -> Result<Relaxed> {
    let n = x.len();
    let mut energy = potential_energy(&x);
    let mut g = gradient(&x);
    let mut gmax = max_abs(&g);
    let mut lambda = 1e-3;
    let mut polish = 0;
    for iter in 0..options.max_iterations {
        if gmax < options.tolerance {
            // A couple of extra Newton steps buy headroom below the tolerance.
            polish += 1;
            if polish > 2 || gmax < 1e-3 * options.tolerance {
                if let Some(dir) = descent_direction_at_saddle(&x)? {
                    // Converged onto a saddle: step off along the unstable
                    // direction and keep going.
                    let step = 0.05 * min_spacing(&x);
                    for i in 0..n {
                        x[i][0] += step * dir[2 * i];
                        x[i][1] += step * dir[2 * i + 1];
                    }
                    energy = potential_energy(&x);
                    g = gradient(&x);
                    gmax = max_abs(&g);
                    polish = 0;
                    continue;
                }
                return Ok((x, energy, gmax));
            }
        }
        let h = interleaved_hessian(&x)?;
        let grad = DVector::from_column_slice(&g);
        let mut accepted = false;
        for _ in 0..60 {
            let mut damped = h.clone();
            for d in 0..2 * n {
                damped[(d, d)] += lambda;
            }
            let Some(chol) = damped.cholesky() else {
                lambda = (lambda * 10.0).max(1e-8);
                continue;
            };
            let step = chol.solve(&grad);
            let trial: Vec<[f64; 2]> = (0..n)
                .map(|i| [x[i][0] - step[2 * i], x[i][1] - step[2 * i + 1]])
                .collect();
            if min_spacing(&trial) < 1e-6 {
                lambda *= 10.0;
                continue;
            }
            let e_trial = potential_energy(&trial);
            let g_trial = gradient(&trial);
            let gmax_trial = max_abs(&g_trial);
            let flat = e_trial <= energy + 1e-13 * energy.abs() && gmax_trial < gmax;
            if e_trial < energy || flat {
                x = trial;
                energy = e_trial;
                g = g_trial;
                gmax = gmax_trial;
                lambda = (lambda * 0.2).max(1e-14);
                accepted = true;
                break;
            }
            lambda = (lambda * 10.0).max(1e-8);
        }
        if !accepted {
            if gmax < options.tolerance {
                return Ok((x, energy, gmax));
            }
            return Err(Error::NonConvergence {
                iterations: iter,
                residual: gmax,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: options.max_iterations,
        residual: gmax,
    })
}

/// Unit direction of negative curvature, ignoring the rotational zero mode.
fn descent_direction_at_saddle(x: &[[f64; 2]]) -> Result<Option<Vec<f64>>> {
    let h = interleaved_hessian(x)?;
    let eig = h.symmetric_eigen();
    let (k, lowest) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    if lowest < -1e-7 {
        Ok(Some(eig.eigenvectors.column(k).iter().copied().collect()))
    } else {
        Ok(None)
    }
}

/// Recenters on the center of charge, fixes the rotational gauge and sorts
/// ions by shell and angle.
///
/// The principal axis of the second-moment tensor is aligned with `x`; for
/// isotropic crystals the outermost ion is placed on the positive `x` axis
/// instead.
pub fn canonicalize(mut positions: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    let n = positions.len() as f64;
    let cx = positions.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = positions.iter().map(|p| p[1]).sum::<f64>() / n;
    for p in positions.iter_mut() {
        p[0] -= cx;
        p[1] -= cy;
    }
    let (sxx, sxy, syy) = positions.iter().fold((0.0, 0.0, 0.0), |(a, b, c), p| {
        (a + p[0] * p[0], b + p[0] * p[1], c + p[1] * p[1])
    });
    let trace = sxx + syy;
    let anisotropy = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
    let outermost = |pts: &[[f64; 2]]| {
        let rmax = pts.iter().map(|p| p[0].hypot(p[1])).fold(0.0, f64::max);
        pts.iter()
            .filter(|p| p[0].hypot(p[1]) > rmax * (1.0 - 1e-7))
            .map(|p| {
                let a = p[1].atan2(p[0]);
                if a < 0.0 {
                    a + 2.0 * PI
                } else {
                    a
                }
            })
            .fold(f64::INFINITY, f64::min)
    };
    let theta = if trace > 0.0 && anisotropy > 1e-6 * trace {
        // Angle of the major axis; choose the half-turn that puts the
        // outermost ion on the positive x side.
        let axis = 0.5 * (2.0 * sxy).atan2(sxx - syy);
        let rotated = rotate(&positions, -axis);
        let far = rotated
            .iter()
            .copied()
            .max_by(|a, b| a[0].abs().total_cmp(&b[0].abs()))
            .unwrap_or([0.0, 0.0]);
        if far[0] < 0.0 {
            axis + PI
        } else {
            axis
        }
    } else {
        outermost(&positions)
    };
    let mut out = rotate(&positions, -theta);
    sort_by_shell(&mut out);
    out
}

/// Rotates every point by `angle` about the origin.
pub fn rotate(points: &[[f64; 2]], angle: f64) -> Vec<[f64; 2]> {
    let (s, c) = angle.sin_cos();
    points
        .iter()
        .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
        .collect()
}

/// Minimum dimensionless spacing for each crystal size.
pub fn min_spacing_scan(sizes: &[usize], options: &SolverOptions) -> Result<Vec<(usize, f64)>> {
    sizes
        .iter()
        .map(|&n| {
            // Frequencies do not enter the dimensionless problem.
            let config = TrapConfig::new(n, 1.0, 10.0)?;
            let crystal = solve_equilibrium(&config, None, options)?;
            Ok((n, crystal.u_min))
        })
        .collect()
}

/// Closed-shell (hexagonal) crystal sizes `3s(s+1) + 1`.
pub fn closed_shell_series(shells: usize) -> Vec<usize> {
    (1..=shells).map(|s| 3 * s * (s + 1) + 1).collect()
}

/// Radial trap frequency giving a minimum spacing `d_min` (meters) for a
/// crystal whose dimensionless minimum spacing is `u_min`.
pub fn omega_r_from_u_min(u_min: f64, d_min: f64, ion_mass: f64, charge: f64) -> f64 {
    (coulomb_constant(charge) * u_min.powi(3) / (ion_mass * d_min.powi(3))).sqrt()
}

/// Solves the `N`-ion crystal and returns the `ω_r` that yields `d_min`.
pub fn omega_r_for_spacing(
    n: usize,
    d_min: f64,
    ion_mass: f64,
    options: &SolverOptions,
) -> Result<f64> {
    if !(d_min > 0.0) {
        return Err(Error::InvalidConfig("d_min must be positive".into()));
    }
    let u_min = min_spacing_scan(&[n], options)?[0].1;
    Ok(omega_r_from_u_min(u_min, d_min, ion_mass, ELEMENTARY_CHARGE))
}
