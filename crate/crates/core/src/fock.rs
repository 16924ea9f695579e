//! Truncated number-state integration of the driven gate, used as an
//! independent check on the closed-form fidelity.
//!
//! The Hamiltonian is diagonal in the two target spins and a sum over modes,
//! so each spin branch and each mode is integrated on its own: columns
//! `|n⟩` of the per-mode propagator are evolved numerically with a
//! fourth-order Magnus scheme and adaptive step doubling. The reduced qubit
//! state is assembled from the thermally weighted overlaps of the branches.
//! A full tensor-product integration is also provided to check that the
//! factorization is sound.


use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::dynamics::{PulseSchedule, TARGET_PHASES};
use crate::modes::AxialSpectrum;
use crate::{Error, Result};

/// Spin branches `(σ_l, σ_n)`, with `|0⟩ ↔ σ = +1`.
pub const BRANCHES: [(f64, f64); 4] = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];

const I: C64 = C64::new(0.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    /// Local error bound per Magnus step.
    pub step_tolerance: f64,
    /// Thermal mixtures are truncated once this much weight is left out.
    pub thermal_tail: f64,
    /// Largest admissible weighted population of the top number state.
    pub top_population: f64,
    /// Initial per-mode cutoff; `None` starts a few levels above the thermal
    /// truncation.
    pub initial_cutoff: Option<usize>,
    pub max_cutoff: usize,
    /// Cutoff increment while searching for an adequate truncation.
    pub cutoff_step: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            step_tolerance: 1e-10,
            thermal_tail: 1e-10,
            top_population: 1e-8,
            initial_cutoff: None,
            max_cutoff: 160,
            cutoff_step: 12,
        }
    }
}

/// Number-state weights `n̄^n/(1+n̄)^{n+1}` up to the first `n` at which the
/// omitted tail drops below `tail`, renormalized.
pub fn thermal_weights(nbar: f64, tail: f64) -> Result<Vec<f64>> {
    if !(nbar >= 0.0) || !nbar.is_finite() {
        return Err(Error::NegativeOccupation(nbar));
    }
    if nbar == 0.0 {
        return Ok(vec![1.0]);
    }
    let ratio = nbar / (1.0 + nbar);
    let mut weights = Vec::new();
    let mut w = 1.0 / (1.0 + nbar);
    let mut kept = 0.0;
    while 1.0 - kept >= tail {
        weights.push(w);
        kept += w;
        w *= ratio;
        if weights.len() > 100_000 {
            break;
        }
    }
    weights.iter_mut().for_each(|x| *x /= kept);
    Ok(weights)
}

/// `v ↦ A(t) v` for an anti-Hermitian generator `A = −iH/ħ`.
trait Generator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, t: f64, x: &[C64], out: &mut [C64]);
}

/// One mode driven by `−d Ω sin(μt) (a† e^{iωt} + a e^{−iωt})` in units of ħ,
/// truncated to `cutoff + 1` levels.
struct DrivenMode {
    cutoff: usize,
    omega: f64,
    mu: f64,
    /// `d Ω_p` on the current segment.
    strength: f64,
    sqrt_n: Vec<f64>,
}

impl Generator for DrivenMode {
    fn dim(&self) -> usize {
        self.cutoff + 1
    }

    fn apply(&self, t: f64, x: &[C64], out: &mut [C64]) {
        let f = self.strength * (self.mu * t).sin();
        let up = I * f * C64::from_polar(1.0, self.omega * t);
        let down = I * f * C64::from_polar(1.0, -self.omega * t);
        let n = self.cutoff;
        for j in 0..=n {
            let mut v = C64::new(0.0, 0.0);
            if j > 0 {
                v += up * self.sqrt_n[j] * x[j - 1];
            }
            if j < n {
                v += down * self.sqrt_n[j + 1] * x[j + 1];
            }
            out[j] = v;
        }
    }
}

/// All target-spin branches and `M` modes on a dense tensor-product basis
/// `|s⟩ ⊗ |n_1 … n_M⟩`.
struct FullSystem {
    cutoff: usize,
    omegas: Vec<f64>,
    mu: f64,
    /// `Ω_p` on the current segment.
    amplitude: f64,
    /// `σ_l c_l^k + σ_n c_n^k` per branch and mode.
    drives: Vec<Vec<f64>>,
    strides: Vec<usize>,
    sqrt_n: Vec<f64>,
}

impl FullSystem {
    fn phonon_dim(&self) -> usize {
        (self.cutoff + 1).pow(self.omegas.len() as u32)
    }
}

impl Generator for FullSystem {
    fn dim(&self) -> usize {
        4 * self.phonon_dim()
    }

    fn apply(&self, t: f64, x: &[C64], out: &mut [C64]) {
        let f = self.amplitude * (self.mu * t).sin();
        let pd = self.phonon_dim();
        let levels = self.cutoff + 1;
        out.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        for (k, &w) in self.omegas.iter().enumerate() {
            let stride = self.strides[k];
            let up = I * f * C64::from_polar(1.0, w * t);
            let down = I * f * C64::from_polar(1.0, -w * t);
            for s in 0..4 {
                let d = self.drives[s][k];
                if d == 0.0 {
                    continue;
                }
                let base = s * pd;
                for idx in 0..pd {
                    let nk = (idx / stride) % levels;
                    let mut v = C64::new(0.0, 0.0);
                    if nk > 0 {
                        v += up * self.sqrt_n[nk] * x[base + idx - stride];
                    }
                    if nk < self.cutoff {
                        v += down * self.sqrt_n[nk + 1] * x[base + idx + stride];
                    }
                    out[base + idx] += d * v;
                }
            }
        }
    }
}

fn norm(x: &[C64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// `exp(Ω₄) x` for the fourth-order Magnus generator of the step `[t, t+h]`,
/// with the exponential summed as a Taylor series.
fn magnus_step<G: Generator>(gen: &G, t: f64, h: f64, x: &[C64], scratch: &mut [Vec<C64>; 5]) -> Result<Vec<C64>> {
    let offset = 3f64.sqrt() / 6.0;
    let t1 = t + h * (0.5 - offset);
    let t2 = t + h * (0.5 + offset);
    let c = 3f64.sqrt() * h * h / 12.0;
    let dim = x.len();
    let [a1v, a2v, a2a1v, a1a2v, _] = scratch;
    let apply_omega = |v: &[C64], out: &mut [C64], a1v: &mut [C64], a2v: &mut [C64], a2a1v: &mut [C64], a1a2v: &mut [C64]| {
        gen.apply(t1, v, a1v);
        gen.apply(t2, v, a2v);
        gen.apply(t2, a1v, a2a1v);
        gen.apply(t1, a2v, a1a2v);
        for j in 0..dim {
            out[j] = 0.5 * h * (a1v[j] + a2v[j]) + c * (a2a1v[j] - a1a2v[j]);
        }
    };
    let mut result = x.to_vec();
    let mut term = x.to_vec();
    let mut next = vec![C64::new(0.0, 0.0); dim];
    let scale = norm(x).max(f64::MIN_POSITIVE);
    for order in 1..=80 {
        apply_omega(&term, &mut next, a1v, a2v, a2a1v, a1a2v);
        let inv = 1.0 / order as f64;
        for j in 0..dim {
            term[j] = next[j] * inv;
            result[j] += term[j];
        }
        if norm(&term) < 1e-17 * scale {
            return Ok(result);
        }
    }
    Err(Error::StepFailure(h))
}

/// Diagnostics gathered while integrating a set of columns.
#[derive(Debug, Clone, PartialEq)]
struct Trajectory {
    columns: Vec<Vec<C64>>,
    /// Largest `|ψ_n(t)[top]|²` over accepted steps, per column.
    top_population: Vec<f64>,
    norm_drift: f64,
    steps: usize,
}

/// Integrates every column over `[0, τ]`, never stepping across a segment
/// boundary. `set_segment` installs the amplitude of segment `p`.
fn integrate<G, S>(gen: &mut G, set_segment: S, schedule: &PulseSchedule, columns: Vec<Vec<C64>>, tol: f64) -> Result<Trajectory>
where
    G: Generator,
    S: Fn(&mut G, usize) -> bool,
{
    let dim = gen.dim();
    let bounds = schedule.bounds();
    let mut cols = columns;
    let initial_norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut top: Vec<f64> = cols.iter().map(|c| c[dim - 1].norm_sqr()).collect();
    let mut drift: f64 = 0.0;
    let mut steps = 0;
    let mut h = (bounds[1] - bounds[0]) / 16.0;
    let h_floor = 1e-13 * schedule.tau;
    let mut scratch: [Vec<C64>; 5] = std::array::from_fn(|_| vec![C64::new(0.0, 0.0); dim]);
    for p in 0..schedule.segments() {
        if !set_segment(gen, p) {
            continue;
        }
        let (mut t, end) = (bounds[p], bounds[p + 1]);
        while t < end {
            let last = t + h >= end;
            let step = if last { end - t } else { h };
            let mut halves = Vec::with_capacity(cols.len());
            let mut err: f64 = 0.0;
            for c in &cols {
                let one = magnus_step(gen, t, step, c, &mut scratch)?;
                let mid = magnus_step(gen, t, 0.5 * step, c, &mut scratch)?;
                let two = magnus_step(gen, t + 0.5 * step, 0.5 * step, &mid, &mut scratch)?;
                let e = one.iter().zip(&two).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt() / 15.0;
                err = err.max(e);
                halves.push(two);
            }
            let factor = if err > 0.0 { 0.9 * (tol / err).powf(0.2) } else { 4.0 };
            if err <= tol {
                cols = halves;
                t = if last { end } else { t + step };
                steps += 1;
                for (i, c) in cols.iter().enumerate() {
                    top[i] = top[i].max(c[dim - 1].norm_sqr());
                    drift = drift.max((norm(c) - initial_norms[i]).abs());
                }
                h = step * factor.clamp(0.2, 4.0);
                if last {
                    // Keep the interior step size for the next segment.
                    h = h.max(step);
                }
            } else {
                h = step * factor.clamp(0.1, 0.5);
                if h < h_floor {
                    return Err(Error::StepFailure(h));
                }
            }
        }
    }
    Ok(Trajectory {
        columns: cols,
        top_population: top,
        norm_drift: drift,
        steps,
    })
}

/// Final states of `|0⟩ … |columns−1⟩` for one mode under drive
/// `d Ω(t) sin(μt)`.
fn evolve_mode(schedule: &PulseSchedule, omega: f64, drive: f64, cutoff: usize, columns: usize, tol: f64) -> Result<Trajectory> {
    let mut gen = DrivenMode {
        cutoff,
        omega,
        mu: schedule.mu,
        strength: 0.0,
        sqrt_n: (0..=cutoff + 1).map(|n| (n as f64).sqrt()).collect(),
    };
    let start: Vec<Vec<C64>> = (0..columns)
        .map(|n| {
            let mut v = vec![C64::new(0.0, 0.0); cutoff + 1];
            v[n] = C64::new(1.0, 0.0);
            v
        })
        .collect();
    let amplitudes = schedule.amplitudes.clone();
    integrate(
        &mut gen,
        |g, p| {
            g.strength = drive * amplitudes[p];
            g.strength != 0.0
        },
        schedule,
        start,
        tol,
    )
}

/// Reduced two-qubit density matrix in the branch basis of [`BRANCHES`].
pub type QubitState = [[C64; 4]; 4];

/// `⟨Ψ_f|ρ|Ψ_f⟩` with `|Ψ_f⟩ = ½ Σ_s e^{iφ_target σ_l σ_n} |s⟩`.
pub fn fidelity_from_state(rho: &QubitState, phi_target: f64) -> f64 {
    let mut f = C64::new(0.0, 0.0);
    for (s, &(sl, sn)) in BRANCHES.iter().enumerate() {
        for (t, &(tl, tn)) in BRANCHES.iter().enumerate() {
            let bra = 0.5 * C64::from_polar(1.0, -phi_target * sl * sn);
            let ket = 0.5 * C64::from_polar(1.0, phi_target * tl * tn);
            f += bra * rho[s][t] * ket;
        }
    }
    f.re
}

/// [`fidelity_from_state`] maximized over the conditional-phase targets.
pub fn best_fidelity(rho: &QubitState) -> f64 {
    TARGET_PHASES
        .iter()
        .map(|&t| fidelity_from_state(rho, t))
        .fold(0.0, f64::max)
}

/// Oracle fidelities and their diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    /// Fidelity per requested occupation, in input order.
    pub fidelity: Vec<f64>,
    pub states: Vec<QubitState>,
    /// Per-mode cutoff that was found adequate.
    pub cutoffs: Vec<usize>,
    /// Largest thermally weighted top-level population over modes, branches
    /// and time.
    pub top_population: f64,
    pub norm_drift: f64,
    pub steps: usize,
}

/// Branch overlap matrices of one mode, one per occupation.
type ModeTraces = Vec<[[C64; 4]; 4]>;

/// Evolves one mode for all four branches at a fixed cutoff; returns the
/// branch overlap matrices per occupation plus diagnostics.
fn mode_traces(
    schedule: &PulseSchedule,
    omega: f64,
    cl: f64,
    cn: f64,
    cutoff: usize,
    weights: &[Vec<f64>],
    tol: f64,
) -> Result<(ModeTraces, f64, f64, usize)> {
    let columns = weights.iter().map(Vec::len).max().unwrap_or(1);
    let runs: Vec<Trajectory> = BRANCHES
        .iter()
        .map(|&(sl, sn)| evolve_mode(schedule, omega, sl * cl + sn * cn, cutoff, columns, tol))
        .collect::<Result<_>>()?;
    let mut traces = Vec::with_capacity(weights.len());
    let mut top: f64 = 0.0;
    for w in weights {
        let mut t = [[C64::new(0.0, 0.0); 4]; 4];
        for s in 0..4 {
            for u in 0..4 {
                for (n, p) in w.iter().enumerate() {
                    let overlap: C64 = runs[u].columns[n]
                        .iter()
                        .zip(&runs[s].columns[n])
                        .map(|(a, b)| a.conj() * b)
                        .sum();
                    t[s][u] += *p * overlap;
                }
            }
        }
        for run in &runs {
            top = top.max(w.iter().zip(&run.top_population).map(|(p, x)| p * x).sum());
        }
        traces.push(t);
    }
    let drift = runs.iter().fold(0.0_f64, |m, r| m.max(r.norm_drift));
    let steps = runs.iter().map(|r| r.steps).sum();
    Ok((traces, top, drift, steps))
}

/// Oracle fidelity of `schedule` at each occupation in `nbars` (the same
/// occupation for every mode), with all modes of `spectrum` included.
pub fn oracle_fidelity(
    schedule: &PulseSchedule,
    spectrum: &AxialSpectrum,
    couplings: &DMatrix<f64>,
    nbars: &[f64],
    options: &OracleOptions,
) -> Result<OracleReport> {
    schedule.validate()?;
    let weights: Vec<Vec<f64>> = nbars
        .iter()
        .map(|&n| thermal_weights(n, options.thermal_tail))
        .collect::<Result<_>>()?;
    let columns = weights.iter().map(Vec::len).max().unwrap_or(1);
    let (l, n) = schedule.pair;
    let per_mode: Vec<(ModeTraces, usize, f64, f64, usize)> = (0..spectrum.mode_count())
        .into_par_iter()
        .map(|k| {
            let mut cutoff = options.initial_cutoff.unwrap_or(columns + 15).max(columns);
            loop {
                let (traces, top, drift, steps) = mode_traces(
                    schedule,
                    spectrum.omega[k],
                    couplings[(l, k)],
                    couplings[(n, k)],
                    cutoff,
                    &weights,
                    options.step_tolerance,
                )?;
                if top < options.top_population {
                    return Ok((traces, cutoff, top, drift, steps));
                }
                if cutoff >= options.max_cutoff {
                    return Err(Error::CutoffInsufficient(cutoff));
                }
                cutoff = (cutoff + options.cutoff_step).min(options.max_cutoff);
            }
        })
        .collect::<Result<_>>()?;

    let mut fidelity = Vec::with_capacity(nbars.len());
    let mut states = Vec::with_capacity(nbars.len());
    for i in 0..nbars.len() {
        let mut rho = [[C64::new(0.25, 0.0); 4]; 4];
        for (traces, ..) in &per_mode {
            for s in 0..4 {
                for u in 0..4 {
                    rho[s][u] *= traces[i][s][u];
                }
            }
        }
        fidelity.push(best_fidelity(&rho));
        states.push(rho);
    }
    Ok(OracleReport {
        fidelity,
        states,
        cutoffs: per_mode.iter().map(|m| m.1).collect(),
        top_population: per_mode.iter().fold(0.0, |m, x| m.max(x.2)),
        norm_drift: per_mode.iter().fold(0.0, |m, x| m.max(x.3)),
        steps: per_mode.iter().map(|m| m.4).sum(),
    })
}

/// Result of integrating the complete spin-phonon state.
#[derive(Debug, Clone, PartialEq)]
pub struct FullReport {
    pub fidelity: f64,
    pub state: QubitState,
    /// Largest change of any spin-branch population.
    pub branch_population_drift: f64,
    pub norm_drift: f64,
    /// Population of states with any mode at its top level.
    pub top_population: f64,
}

/// Integrates `|Ψ₀⟩ ⊗ |0 … 0⟩` on the full tensor-product space with the same
/// `cutoff` for every mode; intended for two or three ions at zero
/// temperature.
pub fn full_tensor_fidelity(
    schedule: &PulseSchedule,
    spectrum: &AxialSpectrum,
    couplings: &DMatrix<f64>,
    cutoff: usize,
    options: &OracleOptions,
) -> Result<FullReport> {
    schedule.validate()?;
    let modes = spectrum.mode_count();
    let levels = cutoff + 1;
    let phonon_dim = levels
        .checked_pow(modes as u32)
        .filter(|d| *d <= 1 << 20)
        .ok_or_else(|| Error::InvalidConfig(format!("{levels}^{modes} phonon states is too many")))?;
    let (l, n) = schedule.pair;
    let drives = BRANCHES
        .iter()
        .map(|&(sl, sn)| (0..modes).map(|k| sl * couplings[(l, k)] + sn * couplings[(n, k)]).collect())
        .collect();
    let mut gen = FullSystem {
        cutoff,
        omegas: spectrum.omega.clone(),
        mu: schedule.mu,
        amplitude: 0.0,
        drives,
        strides: (0..modes).map(|k| levels.pow(k as u32)).collect(),
        sqrt_n: (0..=levels).map(|j| (j as f64).sqrt()).collect(),
    };
    let mut start = vec![C64::new(0.0, 0.0); 4 * phonon_dim];
    for s in 0..4 {
        start[s * phonon_dim] = C64::new(0.5, 0.0);
    }
    let amplitudes = schedule.amplitudes.clone();
    let run = integrate(
        &mut gen,
        |g, p| {
            g.amplitude = amplitudes[p];
            g.amplitude != 0.0
        },
        schedule,
        vec![start],
        options.step_tolerance,
    )?;
    let psi = &run.columns[0];
    let mut rho = [[C64::new(0.0, 0.0); 4]; 4];
    let mut drift: f64 = 0.0;
    for s in 0..4 {
        for u in 0..4 {
            rho[s][u] = (0..phonon_dim)
                .map(|i| psi[s * phonon_dim + i] * psi[u * phonon_dim + i].conj())
                .sum();
        }
        drift = drift.max((rho[s][s].re - 0.25).abs());
    }
    let top: f64 = (0..4 * phonon_dim)
        .filter(|i| (0..modes).any(|k| ((i % phonon_dim) / levels.pow(k as u32)) % levels == cutoff))
        .map(|i| psi[i].norm_sqr())
        .sum();
    Ok(FullReport {
        fidelity: best_fidelity(&rho),
        state: rho,
        branch_population_drift: drift,
        norm_drift: run.norm_drift,
        top_population: top,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    #[test]
    fn thermal_weights_sum_and_length() {
        assert_eq!(thermal_weights(0.0, 1e-10).unwrap(), vec![1.0]);
        let w = thermal_weights(0.5, 1e-10).unwrap();
        assert_eq!(w.len(), 21);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(thermal_weights(-0.1, 1e-10).is_err());
    }

    #[test]
    fn dephased_state_gives_quarter() {
        let mut rho = [[C64::new(0.0, 0.0); 4]; 4];
        for (s, row) in rho.iter_mut().enumerate() {
            row[s] = C64::new(0.25, 0.0);
        }
        assert!((fidelity_from_state(&rho, FRAC_PI_4) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ideal_output_gives_one() {
        let mut rho = [[C64::new(0.0, 0.0); 4]; 4];
        for (s, &(a, b)) in BRANCHES.iter().enumerate() {
            for (u, &(c, d)) in BRANCHES.iter().enumerate() {
                rho[s][u] = 0.25 * C64::from_polar(1.0, FRAC_PI_4 * (a * b - c * d));
            }
        }
        assert!((fidelity_from_state(&rho, FRAC_PI_4) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn undriven_mode_is_unchanged() {
        let s = PulseSchedule::new(1.0, vec![0.0, 0.0], 3.0, (0, 1)).unwrap();
        let run = evolve_mode(&s, 2.0, 0.7, 10, 3, 1e-12).unwrap();
        assert_eq!(run.steps, 0);
        assert_eq!(run.columns[2][2], C64::new(1.0, 0.0));
    }

    #[test]
    fn driven_vacuum_becomes_coherent_state() {
        // Displacement of the vacuum by α = i d ∫ Ω sin(μt) e^{iωt} dt.
        let s = PulseSchedule::new(2.0, vec![1.3, -0.4], 5.0, (0, 1)).unwrap();
        let (omega, d) = (4.0, 0.8);
        let alpha = crate::dynamics::alpha_integral(&s, omega, d);
        let run = evolve_mode(&s, omega, d, 30, 1, 1e-13).unwrap();
        let psi = &run.columns[0];
        let mut coherent = C64::new((-alpha.norm_sqr() / 2.0).exp(), 0.0);
        for (n, amp) in psi.iter().enumerate().take(15) {
            // Up to a global phase, ⟨n|α⟩ ∝ αⁿ/√n!.
            let ratio = *amp / coherent;
            assert!((ratio.norm() - 1.0).abs() < 1e-8, "level {n}: {ratio}");
            coherent *= alpha / ((n + 1) as f64).sqrt();
        }
        assert!(run.norm_drift < 1e-10);
    }
}
