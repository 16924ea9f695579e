//! CODATA 2018 constants in SI units.

pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;
pub const HBAR: f64 = 1.054_571_817e-34;

/// Mass of a ⁹Be⁺ ion in kg.
pub const BERYLLIUM_9_MASS: f64 = 1.4965e-26;

/// `e² / 4πε₀` for a charge `q`, in J·m.
pub fn coulomb_constant(charge: f64) -> f64 {
    charge * charge / (4.0 * std::f64::consts::PI * VACUUM_PERMITTIVITY)
}

/// Converts a frequency in MHz (cycles) to angular frequency in rad/s.
pub fn mhz_to_angular(mhz: f64) -> f64 {
    2.0 * std::f64::consts::PI * mhz * 1e6
}

/// Converts an angular frequency in rad/s to MHz (cycles).
pub fn angular_to_mhz(omega: f64) -> f64 {
    omega / (2.0 * std::f64::consts::PI * 1e6)
}
