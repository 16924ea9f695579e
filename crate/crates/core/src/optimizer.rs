//! Segment amplitude and detuning search for a two-ion phase gate.
//!
//! At fixed detuning the displacements are linear in the amplitude vector
//! and the entangling phase is a quadratic form in it. The seed is the top
//! extremal generalized eigenvector of (phase kernel, thermal displacement
//! cost), rescaled to the target phase and then polished on the exact fidelity.

use std::f64::consts::{FRAC_PI_4, PI};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::Serialize;

use crate::constants::mhz_to_angular;
use crate::crystal::Crystal;
use crate::dynamics::{segment_model, thermal_fidelity, PulseSchedule};
use crate::modes::AxialSpectrum;
use crate::{Error, Result};

/// Cap on coordinate-descent sweeps in the polish.
pub const POLISH_ITERATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizationProblem {
    pub pair: (usize, usize),
    pub tau: f64,
    pub segments: usize,
    /// Detunings to scan, rad/s.
    pub mu_grid: Vec<f64>,
    /// Largest admissible `|Ω_p|` in rad/s.
    pub amplitude_bound: Option<f64>,
    /// Thermal occupation per mode.
    pub nbar: Vec<f64>,
}

impl OptimizationProblem {
    pub fn validate(&self, spectrum: &AxialSpectrum) -> Result<()> {
        if self.mu_grid.is_empty() {
            return Err(Error::InvalidConfig("detuning grid is empty".into()));
        }
        if self.segments == 0 {
            return Err(Error::InvalidConfig("at least one segment is required".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("gate time must be positive, got {}", self.tau)));
        }
        let n = spectrum.vectors.nrows();
        if self.pair.0 == self.pair.1 || self.pair.0 >= n || self.pair.1 >= n {
            return Err(Error::InvalidConfig(format!("invalid pair {:?} for {n} ions", self.pair)));
        }
        if self.nbar.len() != spectrum.mode_count() {
            return Err(Error::InvalidConfig(format!(
                "{} occupations given for {} modes",
                self.nbar.len(),
                spectrum.mode_count()
            )));
        }
        if let Some(bad) = self.nbar.iter().find(|n| !(**n >= 0.0)) {
            return Err(Error::NegativeOccupation(*bad));
        }
        if let Some(b) = self.amplitude_bound {
            if !(b > 0.0) {
                return Err(Error::InvalidConfig(format!("amplitude bound must be positive, got {b}")));
            }
        }
        Ok(())
    }
}

/// One grid point of a detuning scan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanPoint {
    /// Detuning in rad/s.
    pub mu: f64,
    /// Best fidelity, 0 when the point is infeasible.
    pub fidelity: f64,
    /// Peak amplitude in rad/s, 0 when infeasible.
    pub omega_max: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizationResult {
    pub best: PulseSchedule,
    pub fidelity: f64,
    pub phi_ln: f64,
    pub curve: Vec<ScanPoint>,
}

/// Exact gate model at a single detuning.
struct PointModel {
    kernel: DMatrix<f64>,
    /// `A_p(ω_k)` indexed `[k][p]`.
    amps: Vec<Vec<C64>>,
    cl: Vec<f64>,
    cn: Vec<f64>,
    nbar: Vec<f64>,
}

impl PointModel {
    fn new(
        pair: (usize, usize),
        tau: f64,
        segments: usize,
        mu: f64,
        spectrum: &AxialSpectrum,
        couplings: &DMatrix<f64>,
        nbar: &[f64],
    ) -> Self {
        let modes = spectrum.mode_count();
        let cl: Vec<f64> = (0..modes).map(|k| couplings[(pair.0, k)]).collect();
        let cn: Vec<f64> = (0..modes).map(|k| couplings[(pair.1, k)]).collect();
        let products: Vec<f64> = cl.iter().zip(&cn).map(|(a, b)| a * b).collect();
        let (amps, kernel) = segment_model(mu, tau, segments, &spectrum.omega, &products);
        Self {
            kernel,
            amps,
            cl,
            cn,
            nbar: nbar.to_vec(),
        }
    }

    fn segments(&self) -> usize {
        self.kernel.nrows()
    }

    fn phi(&self, w: &[f64]) -> f64 {
        let m = w.len();
        let mut s = 0.0;
        for p in 0..m {
            for q in 0..m {
                s += w[p] * self.kernel[(p, q)] * w[q];
            }
        }
        s
    }

    fn fidelity(&self, w: &[f64], phi: f64) -> f64 {
        let mut al = Vec::with_capacity(self.amps.len());
        let mut an = Vec::with_capacity(self.amps.len());
        for (k, a) in self.amps.iter().enumerate() {
            let drive: C64 = a.iter().zip(w).map(|(x, y)| x * y).sum();
            let d = C64::new(0.0, 1.0) * drive;
            al.push(d * self.cl[k]);
            an.push(d * self.cn[k]);
        }
        thermal_fidelity(&al, &an, phi, &self.nbar).unwrap_or(0.0)
    }

    /// Fidelity after scaling `w` so that `|φ| = π/4`; `None` when `w`
    /// carries no phase.
    fn rescaled(&self, w: &[f64]) -> Option<(f64, f64)> {
        let phi = self.phi(w);
        if !(phi != 0.0) || !phi.is_finite() {
            return None;
        }
        let factor = (FRAC_PI_4 / phi.abs()).sqrt();
        let scaled: Vec<f64> = w.iter().map(|x| x * factor).collect();
        Some((self.fidelity(&scaled, FRAC_PI_4.copysign(phi)), factor))
    }

    /// `Σ_k (2n̄_k+1)(c_l² + c_n²) Re(A_k^* A_kᵀ)`, the leading-order
    /// infidelity as a quadratic form.
    fn displacement_cost(&self) -> DMatrix<f64> {
        let m = self.segments();
        let mut r = DMatrix::zeros(m, m);
        for (k, a) in self.amps.iter().enumerate() {
            let weight = (2.0 * self.nbar[k] + 1.0) * (self.cl[k].powi(2) + self.cn[k].powi(2));
            if weight == 0.0 {
                continue;
            }
            for p in 0..m {
                for q in 0..m {
                    r[(p, q)] += weight * (a[p].conj() * a[q]).re;
                }
            }
        }
        r
    }

    /// Generalized eigenvector of `(G, R)` whose eigenvalue has the largest
    /// magnitude: the most phase per unit of residual displacement.
    fn seed(&self) -> Result<Vec<f64>> {
        let m = self.segments();
        let mut r = self.displacement_cost();
        let shift = 1e-12 * r.trace().max(f64::MIN_POSITIVE) / m as f64;
        for p in 0..m {
            r[(p, p)] += shift;
        }
        let chol = r.cholesky().ok_or(Error::IndefiniteKernel)?;
        let l = chol.l();
        let l_inv = l.clone().try_inverse().ok_or(Error::IndefiniteKernel)?;
        let reduced = &l_inv * &self.kernel * l_inv.transpose();
        let reduced = (&reduced + reduced.transpose()) * 0.5;
        let eig = SymmetricEigen::try_new(reduced, f64::EPSILON, 10_000).ok_or(Error::EigenFailure)?;
        let (top, &lambda) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .ok_or(Error::IndefiniteKernel)?;
        if !(lambda.abs() > 0.0) {
            return Err(Error::IndefiniteKernel);
        }
        let y: DVector<f64> = eig.eigenvectors.column(top).into_owned();
        let w = l_inv.transpose() * y;
        Ok(w.iter().copied().collect())
    }
}

/// Flips the overall sign so the largest-magnitude amplitude is positive.
/// Fidelity and phase are even in the amplitudes.
fn fix_sign(w: &mut [f64]) {
    let mut best = 0;
    for (p, x) in w.iter().enumerate() {
        if x.abs() > w[best].abs() {
            best = p;
        }
    }
    if w[best] < 0.0 {
        w.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Golden-section maximization of `f` on `[lo, hi]`.
fn golden_max<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Coordinate descent on the rescaled exact fidelity; only improving moves
/// are kept, so the result is never worse than `start`.
fn polish(model: &PointModel, start: Vec<f64>) -> Vec<f64> {
    let Some((mut best_f, _)) = model.rescaled(&start) else {
        return start;
    };
    let mut w = start;
    let scale = w.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let mut step = 0.1 * scale;
    let objective = |v: &[f64]| model.rescaled(v).map_or(f64::NEG_INFINITY, |r| r.0);
    for _ in 0..POLISH_ITERATIONS {
        let mut improved = false;
        for p in 0..w.len() {
            let origin = w[p];
            let mut trial = w.clone();
            let (t, f) = golden_max(
                |t| {
                    trial[p] = origin + t;
                    objective(&trial)
                },
                -step,
                step,
                1e-4 * step,
            );
            if f > best_f {
                w[p] = origin + t;
                best_f = f;
                improved = true;
            }
        }
        if !improved {
            step *= 0.25;
            if step < 1e-10 * scale {
                break;
            }
        }
    }
    w
}

/// Best amplitudes at a single detuning, rescaled so that `|φ_ln| = π/4`.
pub fn solve_amplitudes(
    pair: (usize, usize),
    tau: f64,
    segments: usize,
    mu: f64,
    spectrum: &AxialSpectrum,
    couplings: &DMatrix<f64>,
    nbar: &[f64],
) -> Result<(PulseSchedule, f64)> {
    if segments == 0 {
        return Err(Error::InvalidSchedule("at least one segment is required".into()));
    }
    let model = PointModel::new(pair, tau, segments, mu, spectrum, couplings, nbar);
    let seed = model.seed()?;
    let polished = polish(&model, seed);
    let (_, factor) = model.rescaled(&polished).ok_or(Error::IndefiniteKernel)?;
    let mut amplitudes: Vec<f64> = polished.iter().map(|x| x * factor).collect();
    fix_sign(&mut amplitudes);
    let fidelity = model.fidelity(&amplitudes, model.phi(&amplitudes));
    Ok((PulseSchedule::new(tau, amplitudes, mu, pair)?, fidelity))
}

/// Runs [`solve_amplitudes`] at every grid detuning in parallel and keeps the
/// best point; ties go to the lowest grid index.
pub fn detuning_scan(
    problem: &OptimizationProblem,
    spectrum: &AxialSpectrum,
    couplings: &DMatrix<f64>,
) -> Result<OptimizationResult> {
    problem.validate(spectrum)?;
    let solved: Vec<Option<(PulseSchedule, f64)>> = problem
        .mu_grid
        .par_iter()
        .map(|&mu| {
            solve_amplitudes(
                problem.pair,
                problem.tau,
                problem.segments,
                mu,
                spectrum,
                couplings,
                &problem.nbar,
            )
            .ok()
            .filter(|(s, _)| problem.amplitude_bound.is_none_or(|b| s.omega_max() <= b))
        })
        .collect();

    let mut best: Option<usize> = None;
    let curve: Vec<ScanPoint> = problem
        .mu_grid
        .iter()
        .zip(&solved)
        .enumerate()
        .map(|(i, (&mu, point))| match point {
            Some((schedule, f)) => {
                if best.is_none_or(|b| *f > solved[b].as_ref().map_or(f64::NEG_INFINITY, |s| s.1)) {
                    best = Some(i);
                }
                ScanPoint {
                    mu,
                    fidelity: *f,
                    omega_max: schedule.omega_max(),
                    feasible: true,
                }
            }
            None => ScanPoint {
                mu,
                fidelity: 0.0,
                omega_max: 0.0,
                feasible: false,
            },
        })
        .collect();
    let index = best.ok_or(Error::EmptyScan)?;
    let (schedule, fidelity) = solved[index].clone().expect("best index is feasible");
    let model = PointModel::new(
        problem.pair,
        problem.tau,
        problem.segments,
        schedule.mu,
        spectrum,
        couplings,
        &problem.nbar,
    );
    let phi_ln = model.phi(&schedule.amplitudes);
    Ok(OptimizationResult {
        best: schedule,
        fidelity,
        phi_ln,
        curve,
    })
}

/// `points` detunings spaced evenly over `[ω_z − 0.1 MHz, ω_z + 0.2 MHz]`
/// (in cycles), returned in rad/s.
pub fn default_grid(omega_z: f64, points: usize) -> Vec<f64> {
    let center = omega_z / (2.0 * PI) / 1e6;
    linear_grid(center - 0.1, center + 0.2, points)
}

/// Evenly spaced detunings between `lo_mhz` and `hi_mhz` inclusive, in rad/s.
pub fn linear_grid(lo_mhz: f64, hi_mhz: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![mhz_to_angular(lo_mhz)],
        _ => (0..points)
            .map(|i| mhz_to_angular(lo_mhz + (hi_mhz - lo_mhz) * i as f64 / (points - 1) as f64))
            .collect(),
    }
}

/// Pairs `(0, j)` of the central ion with one partner at each of the `count`
/// smallest distinct distances. Distances within `1e-6` relative are the same
/// shell; within a shell the partner with the smallest polar angle about the
/// central ion is taken.
pub fn default_pairs(crystal: &Crystal, count: usize) -> Vec<(usize, usize)> {
    let n = crystal.ion_count();
    if n < 2 {
        return Vec::new();
    }
    let center = crystal.positions[0];
    let angle = |j: usize| {
        let p = crystal.positions[j];
        let a = (p[1] - center[1]).atan2(p[0] - center[0]);
        if a < -1e-9 {
            a + 2.0 * PI
        } else {
            a.max(0.0)
        }
    };
    let mut others: Vec<(f64, usize)> = (1..n).map(|j| (crystal.distance(0, j), j)).collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut pairs = Vec::new();
    let mut i = 0;
    while i < others.len() && pairs.len() < count {
        let d = others[i].0;
        let mut j = i;
        while j < others.len() && others[j].0 - d <= 1e-6 * d {
            j += 1;
        }
        let partner = others[i..j]
            .iter()
            .map(|&(_, idx)| idx)
            .min_by(|a, b| angle(*a).total_cmp(&angle(*b)).then(a.cmp(b)))
            .expect("shell is non-empty");
        pairs.push((0, partner));
        i = j;
    }
    pairs
}

/// One row of a pair-fidelity table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRow {
    pub rank: usize,
    pub pair: (usize, usize),
    /// Ion separation in meters.
    pub distance: f64,
    pub fidelity: f64,
    /// Optimal detuning, rad/s.
    pub mu: f64,
    /// Peak amplitude, rad/s.
    pub omega_max: f64,
    pub schedule: PulseSchedule,
}

/// Detuning scans for every pair of `pairs`, in order.
#[allow(clippy::too_many_arguments)]
pub fn table_one(
    crystal: &Crystal,
    spectrum: &AxialSpectrum,
    couplings: &DMatrix<f64>,
    pairs: &[(usize, usize)],
    tau: f64,
    segments: usize,
    mu_grid: &[f64],
    nbar: &[f64],
) -> Result<Vec<PairRow>> {
    pairs
        .iter()
        .enumerate()
        .map(|(rank, &pair)| {
            let problem = OptimizationProblem {
                pair,
                tau,
                segments,
                mu_grid: mu_grid.to_vec(),
                amplitude_bound: None,
                nbar: nbar.to_vec(),
            };
            let result = detuning_scan(&problem, spectrum, couplings)?;
            Ok(PairRow {
                rank: rank + 1,
                pair,
                distance: crystal.distance(pair.0, pair.1) * crystal.length_scale,
                fidelity: result.fidelity,
                mu: result.best.mu,
                omega_max: result.best.omega_max(),
                schedule: result.best,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_crystal() -> (AxialSpectrum, DMatrix<f64>) {
        use crate::crystal::{solve_equilibrium, SolverOptions, TrapConfig};
        use crate::dynamics::normalized_couplings;
        use crate::modes::{axial_spectrum, build_matrices};
        let trap = TrapConfig::new(7, mhz_to_angular(0.5), mhz_to_angular(3.0)).unwrap();
        let c = solve_equilibrium(&trap, None, &SolverOptions::default()).unwrap();
        let spectrum = axial_spectrum(&build_matrices(&c, trap.beta()).unwrap(), &trap).unwrap();
        let couplings = normalized_couplings(&spectrum, trap.omega_z).unwrap();
        (spectrum, couplings)
    }

    #[test]
    fn polish_never_loses_to_its_seed() {
        let (spectrum, couplings) = small_crystal();
        let nbar = vec![0.1; spectrum.mode_count()];
        for (pair, segments) in [((0, 1), 5), ((0, 4), 3), ((2, 5), 7)] {
            for offset in [-0.02, 0.004, 0.01, 0.03] {
                let mu = mhz_to_angular(3.0 + offset);
                let model = PointModel::new(pair, 40e-6, segments, mu, &spectrum, &couplings, &nbar);
                let seed = model.seed().unwrap();
                let (before, _) = model.rescaled(&seed).unwrap();
                let polished = polish(&model, seed);
                let (after, _) = model.rescaled(&polished).unwrap();
                assert!(after >= before, "{pair:?} {offset}: {after} < {before}");
            }
        }
    }

    #[test]
    fn golden_section_finds_parabola_peak() {
        let (x, f) = golden_max(|t| -(t - 0.3).powi(2), -1.0, 1.0, 1e-10);
        assert!((x - 0.3).abs() < 1e-8);
        assert!(f.abs() < 1e-15);
    }

    #[test]
    fn sign_convention() {
        let mut w = vec![0.5, -2.0, 1.0];
        fix_sign(&mut w);
        assert_eq!(w, vec![-0.5, 2.0, -1.0]);
    }

    #[test]
    fn grids() {
        let g = default_grid(mhz_to_angular(10.0), 301);
        assert_eq!(g.len(), 301);
        assert!((g[0] - mhz_to_angular(9.9)).abs() < 1e-6);
        assert!((g[300] - mhz_to_angular(10.2)).abs() < 1e-6);
        assert_eq!(linear_grid(1.0, 2.0, 1), vec![mhz_to_angular(1.0)]);
        assert!(linear_grid(1.0, 2.0, 0).is_empty());
    }
}
