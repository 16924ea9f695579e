//! Evolution under a segmented spin-dependent force on two target ions.
//!
//! The force on each target is `F(t) = Ω_p sin(μt)` on segment `p`. Forces
//! are normalized so that `(i/ħ) F(t) g_n^k = i Ω(t) sin(μt) c_n^k` with
//! `c_n^k = g_n^k / g_ref` and `g_ref = √(ħ / 2Mω_z)`; amplitudes `Ω_p` are
//! then angular frequencies in rad/s.
//!
//! After the gate, spin branch `(σ_l, σ_n)` has picked up the qubit phase
//! `φ_ln σ_l σ_n` and a displacement `σ_l α_l^k + σ_n α_n^k` of each mode.

use std::f64::consts::FRAC_PI_4;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::Serialize;

use crate::constants::HBAR;
use crate::crystal::{Crystal, TrapConfig};
use crate::integrals::{mode_kernels, segment_amplitude, segment_bounds};
use crate::modes::AxialSpectrum;
use crate::{Error, Result};

/// Piecewise-constant amplitude sine drive applied to a pair of ions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PulseSchedule {
    /// Gate time in seconds.
    pub tau: f64,
    /// Segment amplitudes `Ω_p` in rad/s.
    pub amplitudes: Vec<f64>,
    /// Drive detuning `μ` in rad/s.
    pub mu: f64,
    pub pair: (usize, usize),
}

impl PulseSchedule {
    pub fn new(tau: f64, amplitudes: Vec<f64>, mu: f64, pair: (usize, usize)) -> Result<Self> {
        let s = Self {
            tau,
            amplitudes,
            mu,
            pair,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidSchedule(format!("tau must be positive, got {}", self.tau)));
        }
        if self.amplitudes.is_empty() {
            return Err(Error::InvalidSchedule("at least one segment is required".into()));
        }
        if self.pair.0 == self.pair.1 {
            return Err(Error::InvalidSchedule("target ions must differ".into()));
        }
        if !self.mu.is_finite() || self.amplitudes.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidSchedule("non-finite drive parameter".into()));
        }
        Ok(())
    }

    pub fn segments(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn bounds(&self) -> Vec<f64> {
        segment_bounds(self.tau, self.segments())
    }

    /// Largest `|Ω_p|`, the peak drive strength.
    pub fn omega_max(&self) -> f64 {
        self.amplitudes.iter().fold(0.0_f64, |m, a| m.max(a.abs()))
    }

    /// Drive amplitude `Ω(t) sin(μt)` at time `t`.
    pub fn drive(&self, t: f64) -> f64 {
        let m = self.segments();
        let p = ((t / self.tau) * m as f64).floor().clamp(0.0, (m - 1) as f64) as usize;
        self.amplitudes[p] * (self.mu * t).sin()
    }

    /// Copy with amplitudes multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            amplitudes: self.amplitudes.iter().map(|a| a * factor).collect(),
            ..self.clone()
        }
    }
}

/// Physical coupling constants `g_n^k = √(ħ/2Mω_k) b_n^k` in meters, ions by
/// rows and modes by columns.
pub fn coupling_constants(spectrum: &AxialSpectrum, config: &TrapConfig) -> Result<DMatrix<f64>> {
    check_stable(spectrum)?;
    let n = spectrum.vectors.nrows();
    Ok(DMatrix::from_fn(n, spectrum.mode_count(), |i, k| {
        (HBAR / (2.0 * config.ion_mass * spectrum.omega[k])).sqrt() * spectrum.component(i, k)
    }))
}

/// `√(ħ/2Mω)` in meters.
pub fn zero_point_length(ion_mass: f64, omega: f64) -> f64 {
    (HBAR / (2.0 * ion_mass * omega)).sqrt()
}

/// Dimensionless couplings `c_n^k = g_n^k / √(ħ/2Mω_z) = √(ω_z/ω_k) b_n^k`.
pub fn normalized_couplings(spectrum: &AxialSpectrum, omega_z: f64) -> Result<DMatrix<f64>> {
    check_stable(spectrum)?;
    let n = spectrum.vectors.nrows();
    Ok(DMatrix::from_fn(n, spectrum.mode_count(), |i, k| {
        (omega_z / spectrum.omega[k]).sqrt() * spectrum.component(i, k)
    }))
}

fn check_stable(spectrum: &AxialSpectrum) -> Result<()> {
    if !spectrum.stable || spectrum.omega.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::UnstableSpectrum(spectrum.min_eigenvalue()));
    }
    Ok(())
}

/// `∫₀^τ Ω(t) sin(μt) e^{iωt} dt` for the whole schedule.
pub fn drive_integral(schedule: &PulseSchedule, omega: f64) -> C64 {
    let b = schedule.bounds();
    schedule
        .amplitudes
        .iter()
        .enumerate()
        .filter(|(_, a)| **a != 0.0)
        .map(|(p, a)| *a * segment_amplitude(schedule.mu, omega, b[p], b[p + 1]))
        .sum()
}

/// Same as [`drive_integral`] but stopping at time `t ≤ τ`.
pub fn partial_drive_integral(schedule: &PulseSchedule, omega: f64, t: f64) -> C64 {
    let b = schedule.bounds();
    let mut sum = C64::new(0.0, 0.0);
    for (p, a) in schedule.amplitudes.iter().enumerate() {
        if b[p] >= t {
            break;
        }
        if *a != 0.0 {
            sum += *a * segment_amplitude(schedule.mu, omega, b[p], b[p + 1].min(t));
        }
    }
    sum
}

/// Residual displacement `α = i c ∫ Ω(t) sin(μt) e^{iωt} dt` of a mode with
/// frequency `omega` and dimensionless coupling `coupling`.
pub fn alpha_integral(schedule: &PulseSchedule, omega: f64, coupling: f64) -> C64 {
    C64::new(0.0, coupling) * drive_integral(schedule, omega)
}

/// The symmetric `m × m` matrix `G` with `φ_ln = Ωᵀ G Ω`.
pub fn phase_kernel(
    mu: f64,
    tau: f64,
    segments: usize,
    omegas: &[f64],
    coupling_products: &[f64],
) -> DMatrix<f64> {
    segment_model(mu, tau, segments, omegas, coupling_products).1
}

/// Per-mode segment amplitudes `A_p(ω_k)` together with the phase kernel `G`.
pub fn segment_model(
    mu: f64,
    tau: f64,
    segments: usize,
    omegas: &[f64],
    coupling_products: &[f64],
) -> (Vec<Vec<C64>>, DMatrix<f64>) {
    let bounds = segment_bounds(tau, segments);
    let mut g = DMatrix::zeros(segments, segments);
    let mut all_amps = Vec::with_capacity(omegas.len());
    for (&w, &cc) in omegas.iter().zip(coupling_products) {
        let (amps, k) = mode_kernels(mu, w, &bounds);
        all_amps.push(amps);
        if cc == 0.0 {
            continue;
        }
        for p in 0..segments {
            // 2 c_l c_n K, symmetrized.
            g[(p, p)] += 2.0 * cc * k[p][p];
            for q in 0..p {
                g[(p, q)] += cc * k[p][q];
                g[(q, p)] += cc * k[p][q];
            }
        }
    }
    (all_amps, g)
}

/// Entangling phase `φ_ln` in radians.
pub fn phi_integral(schedule: &PulseSchedule, spectrum: &AxialSpectrum, couplings: &DMatrix<f64>) -> f64 {
    let (l, n) = schedule.pair;
    let products: Vec<f64> = (0..spectrum.mode_count())
        .map(|k| couplings[(l, k)] * couplings[(n, k)])
        .collect();
    let g = phase_kernel(schedule.mu, schedule.tau, schedule.segments(), &spectrum.omega, &products);
    let w = nalgebra::DVector::from_column_slice(&schedule.amplitudes);
    (w.transpose() * &g * &w)[(0, 0)]
}

/// Residual displacements `(α_l^k, α_n^k)` of every mode.
pub fn residual_displacements(
    schedule: &PulseSchedule,
    spectrum: &AxialSpectrum,
    couplings: &DMatrix<f64>,
) -> (Vec<C64>, Vec<C64>) {
    let (l, n) = schedule.pair;
    let mut al = Vec::with_capacity(spectrum.mode_count());
    let mut an = Vec::with_capacity(spectrum.mode_count());
    for k in 0..spectrum.mode_count() {
        let i = C64::new(0.0, 1.0) * drive_integral(schedule, spectrum.omega[k]);
        al.push(i * couplings[(l, k)]);
        an.push(i * couplings[(n, k)]);
    }
    (al, an)
}

const BRANCHES: [(f64, f64); 4] = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];

/// Entangling phases that realize a conditional phase flip. The two differ
/// by `σ_l σ_n`, a product of single-qubit rotations.
pub const TARGET_PHASES: [f64; 2] = [FRAC_PI_4, -FRAC_PI_4];

/// Thermally averaged overlap of the two-qubit output with the ideal
/// conditional-phase image of `(|0⟩+|1⟩)(|0⟩+|1⟩)/2`, maximized over the two
/// [`TARGET_PHASES`].
pub fn thermal_fidelity(alpha_l: &[C64], alpha_n: &[C64], phi_ln: f64, nbar: &[f64]) -> Result<f64> {
    let terms = branch_terms(alpha_l, alpha_n, nbar)?;
    Ok(TARGET_PHASES
        .iter()
        .map(|t| combine_branches(&terms, phi_ln - t))
        .fold(0.0, f64::max))
}

/// Same as [`thermal_fidelity`] for one target phase `target`.
///
/// With `A_s^k = σ_l α_l^k + σ_n α_n^k` and `δ = φ_ln − target`,
///
/// ```text
/// F = 1/16 Σ_{s,s'} e^{iδ(P_s − P_s')} Π_k exp(i Im(A_{s'}^* A_s) − |A_s − A_{s'}|² (2n̄_k + 1)/2)
/// ```
///
/// where `P_s = σ_l σ_n`.
pub fn thermal_fidelity_for_target(
    alpha_l: &[C64],
    alpha_n: &[C64],
    phi_ln: f64,
    nbar: &[f64],
    target: f64,
) -> Result<f64> {
    let terms = branch_terms(alpha_l, alpha_n, nbar)?;
    Ok(combine_branches(&terms, phi_ln - target))
}

/// Mode factors of the branch pairs `s ≤ s'` in [`BRANCHES`] order, as
/// `(P_s − P_s', log of Π_k(...), multiplicity)`; an off-diagonal pair also
/// stands for its complex-conjugate partner `(s', s)`.
fn branch_terms(alpha_l: &[C64], alpha_n: &[C64], nbar: &[f64]) -> Result<Vec<(f64, C64, f64)>> {
    if alpha_l.len() != alpha_n.len() || alpha_l.len() != nbar.len() {
        return Err(Error::InvalidSchedule("per-mode inputs have mismatched lengths".into()));
    }
    if let Some(bad) = nbar.iter().find(|n| !(**n >= 0.0)) {
        return Err(Error::NegativeOccupation(*bad));
    }
    let mut terms = Vec::with_capacity(10);
    for (s, &(sl, sn)) in BRANCHES.iter().enumerate() {
        for (u, &(tl, tn)) in BRANCHES.iter().enumerate().skip(s) {
            let mut exponent = C64::new(0.0, 0.0);
            for k in 0..alpha_l.len() {
                let a = sl * alpha_l[k] + sn * alpha_n[k];
                let b = tl * alpha_l[k] + tn * alpha_n[k];
                exponent += C64::new(
                    -0.5 * (a - b).norm_sqr() * (2.0 * nbar[k] + 1.0),
                    (b.conj() * a).im,
                );
            }
            terms.push((sl * sn - tl * tn, exponent, if u == s { 1.0 } else { 2.0 }));
        }
    }
    Ok(terms)
}

fn combine_branches(terms: &[(f64, C64, f64)], delta: f64) -> f64 {
    let mut total = 0.0;
    for &(dp, exponent, multiplicity) in terms {
        total += multiplicity * (exponent + C64::new(0.0, delta * dp)).exp().re;
    }
    (total / 16.0).clamp(0.0, 1.0)
}

/// Per-ion peak axial excursion during the gate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResponseProfile {
    /// `max_t |q_j(t)|` in meters.
    pub peak: Vec<f64>,
    /// `peak` divided by the larger target-ion value.
    pub normalized: Vec<f64>,
}

/// Peak displacement of every ion for the branch `σ_l = σ_n = +1`, sampled on
/// 2000 uniform times plus the segment boundaries.
pub fn response_profile(
    schedule: &PulseSchedule,
    spectrum: &AxialSpectrum,
    couplings: &DMatrix<f64>,
    crystal: &Crystal,
) -> Result<ResponseProfile> {
    const SAMPLES: usize = 2000;
    check_stable(spectrum)?;
    let (l, n) = schedule.pair;
    let ions = crystal.ion_count();
    let modes = spectrum.mode_count();
    let mut times: Vec<f64> = (1..=SAMPLES)
        .map(|i| schedule.tau * i as f64 / SAMPLES as f64)
        .chain(schedule.bounds())
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();

    // Position scale √(2ħ/Mω_k) b_j^k per ion and mode.
    let lengths: Vec<f64> = (0..modes)
        .map(|k| 2.0 * zero_point_length(crystal.config.ion_mass, spectrum.omega[k]))
        .collect();
    let mut peak = vec![0.0_f64; ions];
    let mut mode_disp = vec![0.0; modes];
    for &t in &times {
        for k in 0..modes {
            let w = spectrum.omega[k];
            let c = couplings[(l, k)] + couplings[(n, k)];
            let a = C64::new(0.0, c) * partial_drive_integral(schedule, w, t);
            let rot = C64::from_polar(1.0, -w * t);
            mode_disp[k] = lengths[k] * (a * rot).re;
        }
        for (j, p) in peak.iter_mut().enumerate() {
            let q: f64 = (0..modes).map(|k| spectrum.component(j, k) * mode_disp[k]).sum();
            *p = p.max(q.abs());
        }
    }
    let reference = peak[l].max(peak[n]);
    let normalized = if reference > 0.0 {
        peak.iter().map(|p| p / reference).collect()
    } else {
        vec![0.0; ions]
    };
    Ok(ResponseProfile { peak, normalized })
}

/// Everything reported about one gate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateReport {
    pub schedule: PulseSchedule,
    pub fidelity: f64,
    pub phi_ln: f64,
    #[serde(skip)]
    pub alpha_l: Vec<C64>,
    #[serde(skip)]
    pub alpha_n: Vec<C64>,
    /// `(|α_l^k|, |α_n^k|)` per mode.
    pub alpha_abs: Vec<(f64, f64)>,
    pub response: Option<ResponseProfile>,
}

/// Evaluates phase, displacements and fidelity of `schedule`; the response
/// profile is included when `crystal` is given.
pub fn gate_report(
    schedule: &PulseSchedule,
    spectrum: &AxialSpectrum,
    couplings: &DMatrix<f64>,
    nbar: &[f64],
    crystal: Option<&Crystal>,
) -> Result<GateReport> {
    schedule.validate()?;
    check_stable(spectrum)?;
    let ions = couplings.nrows();
    if schedule.pair.0 >= ions || schedule.pair.1 >= ions {
        return Err(Error::InvalidSchedule(format!(
            "pair {:?} out of range for {ions} ions",
            schedule.pair
        )));
    }
    let (alpha_l, alpha_n) = residual_displacements(schedule, spectrum, couplings);
    let phi_ln = phi_integral(schedule, spectrum, couplings);
    let fidelity = thermal_fidelity(&alpha_l, &alpha_n, phi_ln, nbar)?;
    let response = crystal
        .map(|c| response_profile(schedule, spectrum, couplings, c))
        .transpose()?;
    Ok(GateReport {
        schedule: schedule.clone(),
        fidelity,
        phi_ln,
        alpha_abs: alpha_l.iter().zip(&alpha_n).map(|(a, b)| (a.norm(), b.norm())).collect(),
        alpha_l,
        alpha_n,
        response,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::BERYLLIUM_9_MASS;
    use std::f64::consts::PI;

    #[test]
    fn ideal_gate_has_unit_fidelity() {
        let z = vec![C64::new(0.0, 0.0); 3];
        let f = thermal_fidelity(&z, &z, FRAC_PI_4, &[0.5; 3]).unwrap();
        assert!((f - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pure_phase_error() {
        let z = vec![C64::new(0.0, 0.0); 2];
        for delta in [0.0, 0.1, -0.3, FRAC_PI_4, -FRAC_PI_4] {
            let f = thermal_fidelity_for_target(&z, &z, FRAC_PI_4 + delta, &[0.0; 2], FRAC_PI_4).unwrap();
            assert!((f - delta.cos().powi(2)).abs() < 1e-14, "{delta}");
        }
        // The better of the two conditional-phase targets is reported.
        let f = thermal_fidelity(&z, &z, -FRAC_PI_4 + 0.2, &[0.0; 2]).unwrap();
        assert!((f - 0.2f64.cos().powi(2)).abs() < 1e-14);
        // No drive at all leaves half the ideal overlap.
        let f = thermal_fidelity(&z, &z, 0.0, &[0.1; 2]).unwrap();
        assert!((f - 0.5).abs() < 1e-14);
    }

    #[test]
    fn negative_occupation_rejected() {
        let z = vec![C64::new(0.0, 0.0); 1];
        assert!(matches!(
            thermal_fidelity(&z, &z, 0.0, &[-1.0]),
            Err(Error::NegativeOccupation(_))
        ));
    }

    #[test]
    fn zero_point_length_of_beryllium() {
        let g = zero_point_length(BERYLLIUM_9_MASS, 2.0 * PI * 10e6);
        // ħ / (2 · 1.4965e-26 kg · 2π · 10⁷ s⁻¹) = 5.6077e-17 m²
        assert!((g - 7.4885e-9).abs() < 1e-12, "{g}");
        let heavier = zero_point_length(2.0 * BERYLLIUM_9_MASS, 2.0 * PI * 10e6);
        assert!((heavier * 2f64.sqrt() - g).abs() < 1e-20);
    }

    #[test]
    fn zero_force_gives_zero_alpha() {
        let s = PulseSchedule::new(1e-5, vec![0.0; 4], 1e7, (0, 1)).unwrap();
        assert_eq!(alpha_integral(&s, 1.1e7, 0.3), C64::new(0.0, 0.0));
    }

    #[test]
    fn schedule_validation() {
        assert!(PulseSchedule::new(0.0, vec![1.0], 1.0, (0, 1)).is_err());
        assert!(PulseSchedule::new(1.0, vec![], 1.0, (0, 1)).is_err());
        assert!(PulseSchedule::new(1.0, vec![1.0], 1.0, (2, 2)).is_err());
        let s = PulseSchedule::new(3.0, vec![1.0, 2.0, 3.0], 0.5, (0, 1)).unwrap();
        assert_eq!(s.bounds(), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(s.drive(2.5), 3.0 * (0.5f64 * 2.5).sin());
        assert_eq!(s.drive(3.0), 3.0 * (0.5f64 * 3.0).sin());
    }

    #[test]
    fn partial_integral_reaches_full_integral() {
        let s = PulseSchedule::new(2.0, vec![0.3, -1.0, 0.7], 5.0, (0, 1)).unwrap();
        let full = drive_integral(&s, 4.0);
        assert!((partial_drive_integral(&s, 4.0, 2.0) - full).norm() < 1e-15);
        assert_eq!(partial_drive_integral(&s, 4.0, 0.0), C64::new(0.0, 0.0));
    }
}
