use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid trap configuration: {0}")]
    InvalidConfig(String),

    #[error("equilibrium solver did not converge after {iterations} iterations (max gradient {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("seed positions {0} and {1} coincide")]
    DegenerateSeed(usize, usize),

    #[error("power-law fit needs at least 3 points, got {0}")]
    InsufficientPoints(usize),

    #[error("power-law fit point {index} is outside the domain: {reason}")]
    InvalidPoint { index: usize, reason: String },

    #[error("ions {0} and {1} are closer than 1e-6 length units")]
    CoincidentIons(usize, usize),

    #[error("symmetric eigensolver failed to converge")]
    EigenFailure,

    #[error("no sign change of the smallest axial eigenvalue in [{lo}, {hi}]")]
    BracketFailure { lo: f64, hi: f64 },

    #[error("axial spectrum is unstable (smallest eigenvalue {0:.3e})")]
    UnstableSpectrum(f64),

    #[error("invalid pulse schedule: {0}")]
    InvalidSchedule(String),

    #[error("negative thermal occupation {0}")]
    NegativeOccupation(f64),

    #[error("phase kernel produces no entangling phase at this detuning")]
    IndefiniteKernel,

    #[error("no detuning in the scan produced an entangling phase")]
    EmptyScan,

    #[error("Fock cutoff {0} is insufficient for the requested accuracy")]
    CutoffInsufficient(usize),

    #[error("adaptive propagation failed at t = {0:.6e} s")]
    StepFailure(f64),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
