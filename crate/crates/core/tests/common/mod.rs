//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

pub mod quadrature;

use std::sync::OnceLock;

use gatelab::constants::mhz_to_angular;
use gatelab::crystal::{solve_equilibrium, Crystal, SolverOptions, TrapConfig};
use gatelab::dynamics::{normalized_couplings, PulseSchedule};
use gatelab::modes::{axial_spectrum, build_matrices, AxialSpectrum};
use nalgebra::DMatrix;
use rand::Rng;

/// A solved crystal with its axial spectrum and normalized couplings.
pub struct Setup {
    pub crystal: Crystal,
    pub spectrum: AxialSpectrum,
    pub couplings: DMatrix<f64>,
}

pub fn setup(ion_count: usize, omega_r_mhz: f64, omega_z_mhz: f64) -> Setup {
    let trap = TrapConfig::new(ion_count, mhz_to_angular(omega_r_mhz), mhz_to_angular(omega_z_mhz)).unwrap();
    let crystal = solve_equilibrium(&trap, None, &SolverOptions::default()).unwrap();
    from_crystal(crystal)
}

pub fn from_crystal(crystal: Crystal) -> Setup {
    let matrices = build_matrices(&crystal, crystal.config.beta()).unwrap();
    let spectrum = axial_spectrum(&matrices, &crystal.config).unwrap();
    let couplings = normalized_couplings(&spectrum, crystal.config.omega_z).unwrap();
    Setup {
        crystal,
        spectrum,
        couplings,
    }
}

/// The 127-ion crystal at ω_r/2π = 0.2 MHz, ω_z/2π = 10 MHz, solved once
/// per test binary.
pub fn crystal_127() -> &'static Crystal {
    static CELL: OnceLock<Crystal> = OnceLock::new();
    CELL.get_or_init(|| setup(127, 0.2, 10.0).crystal)
}

/// Three ions at ω_r/2π = 0.5 MHz, ω_z/2π = 2 MHz: a small crystal whose
/// gate dynamics stay cheap to integrate.
pub fn three_ions() -> Setup {
    setup(3, 0.5, 2.0)
}

/// Random schedule on the pair `(0, 1)` with `τ` in microseconds, drawn so
/// that `μ` sits within `spread` (relative) of `center`.
pub fn random_schedule<R: Rng>(rng: &mut R, center: f64, spread: f64, tau_us: (f64, f64), amp: f64) -> PulseSchedule {
    let segments = rng.gen_range(1..=7);
    let tau = rng.gen_range(tau_us.0..tau_us.1) * 1e-6;
    let mu = center * (1.0 + rng.gen_range(-spread..spread));
    let amplitudes = (0..segments).map(|_| rng.gen_range(-amp..amp)).collect();
    PulseSchedule::new(tau, amplitudes, mu, (0, 1)).unwrap()
}

pub fn pair_products(couplings: &DMatrix<f64>, pair: (usize, usize)) -> Vec<f64> {
    (0..couplings.ncols())
        .map(|k| couplings[(pair.0, k)] * couplings[(pair.1, k)])
        .collect()
}

/// Gradient of the dimensionless potential with the axial coordinate, `z`
/// confined by β: `x_i − Σ_j (x_i − x_j)/d³` and `β² z_i − Σ_j (z_i − z_j)/d³`.
pub fn force_3d(x: &[f64], n: usize, beta: f64) -> Vec<f64> {
    let mut g: Vec<f64> = (0..3 * n)
        .map(|a| if a % 3 == 2 { beta * beta * x[a] } else { x[a] })
        .collect();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d: f64 = (0..3).map(|c| (x[3 * i + c] - x[3 * j + c]).powi(2)).sum::<f64>().sqrt();
            for c in 0..3 {
                g[3 * i + c] -= (x[3 * i + c] - x[3 * j + c]) / d.powi(3);
            }
        }
    }
    g
}

/// Central differences of [`force_3d`] at the planar equilibrium.
pub fn numeric_hessian(c: &Crystal, beta: f64) -> DMatrix<f64> {
    let n = c.ion_count();
    let mut x: Vec<f64> = c.positions.iter().flat_map(|p| [p[0], p[1], 0.0]).collect();
    let h = 1e-5;
    let mut hess = DMatrix::zeros(3 * n, 3 * n);
    for b in 0..3 * n {
        x[b] += h;
        let plus = force_3d(&x, n, beta);
        x[b] -= 2.0 * h;
        let minus = force_3d(&x, n, beta);
        x[b] += h;
        for a in 0..3 * n {
            hess[(a, b)] = (plus[a] - minus[a]) / (2.0 * h);
        }
    }
    hess
}

/// Largest entry-wise difference between the analytic in-plane and axial
/// blocks and [`numeric_hessian`].
pub fn hessian_mismatch(c: &Crystal, beta: f64) -> f64 {
    let n = c.ion_count();
    let m = build_matrices(c, beta).unwrap();
    let hess = numeric_hessian(c, beta);
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            let blocks = [
                (m.axx[(i, j)], hess[(3 * i, 3 * j)]),
                (m.axy[(i, j)], hess[(3 * i, 3 * j + 1)]),
                (m.ayy[(i, j)], hess[(3 * i + 1, 3 * j + 1)]),
                (m.azz[(i, j)], hess[(3 * i + 2, 3 * j + 2)]),
            ];
            for (a, b) in blocks {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}
