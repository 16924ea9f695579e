//! Harmonic expansion about a planar equilibrium and the axial normal modes.
//!
//! All matrices are dimensionless, in units of `M ω_r²`. The axial block
//! decouples from the in-plane block for a planar crystal, so the gate only
//! needs the eigen-decomposition of `A^zz`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::crystal::{Crystal, TrapConfig};
use crate::{Error, Result};

/// Second derivatives of the dimensionless potential at equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrices {
    pub axx: DMatrix<f64>,
    pub axy: DMatrix<f64>,
    pub ayy: DMatrix<f64>,
    pub azz: DMatrix<f64>,
    pub beta: f64,
}

impl CouplingMatrices {
    pub fn ion_count(&self) -> usize {
        self.azz.nrows()
    }

    /// The same matrices for another anisotropy; only `A^zz` depends on β.
    pub fn with_beta(&self, beta: f64) -> Self {
        let shift = beta * beta - self.beta * self.beta;
        let mut azz = self.azz.clone();
        for i in 0..azz.nrows() {
            azz[(i, i)] += shift;
        }
        Self {
            azz,
            beta,
            ..self.clone()
        }
    }

    /// In-plane block `[[A^xx, A^xy], [A^xy, A^yy]]` of size `2N`.
    pub fn planar_block(&self) -> DMatrix<f64> {
        let n = self.ion_count();
        let mut m = DMatrix::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(&self.axx);
        m.view_mut((0, n), (n, n)).copy_from(&self.axy);
        m.view_mut((n, 0), (n, n)).copy_from(&self.axy);
        m.view_mut((n, n), (n, n)).copy_from(&self.ayy);
        m
    }
}

/// Builds `A^xx`, `A^xy`, `A^yy` and `A^zz` for a converged crystal.
pub fn build_matrices(crystal: &Crystal, beta: f64) -> Result<CouplingMatrices> {
    coupling_from_positions(&crystal.positions, beta)
}

/// Builds the coupling matrices from dimensionless planar positions.
pub fn coupling_from_positions(positions: &[[f64; 2]], beta: f64) -> Result<CouplingMatrices> {
    let n = positions.len();
    let mut axx = DMatrix::zeros(n, n);
    let mut axy = DMatrix::zeros(n, n);
    let mut ayy = DMatrix::zeros(n, n);
    let mut azz = DMatrix::zeros(n, n);
    for m in 0..n {
        axx[(m, m)] = 1.0;
        ayy[(m, m)] = 1.0;
        azz[(m, m)] = beta * beta;
    }
    for m in 0..n {
        for p in m + 1..n {
            let dx = positions[m][0] - positions[p][0];
            let dy = positions[m][1] - positions[p][1];
            let r2 = dx * dx + dy * dy;
            let r = r2.sqrt();
            if r < 1e-6 {
                return Err(Error::CoincidentIons(m, p));
            }
            let inv3 = 1.0 / (r2 * r);
            let inv5 = inv3 / r2;
            let xx = (2.0 * dx * dx - dy * dy) * inv5;
            let yy = (2.0 * dy * dy - dx * dx) * inv5;
            let xy = 3.0 * dx * dy * inv5;

            axx[(m, p)] = -xx;
            axx[(p, m)] = -xx;
            axx[(m, m)] += xx;
            axx[(p, p)] += xx;

            ayy[(m, p)] = -yy;
            ayy[(p, m)] = -yy;
            ayy[(m, m)] += yy;
            ayy[(p, p)] += yy;

            axy[(m, p)] = -xy;
            axy[(p, m)] = -xy;
            axy[(m, m)] += xy;
            axy[(p, p)] += xy;

            azz[(m, p)] = inv3;
            azz[(p, m)] = inv3;
            azz[(m, m)] -= inv3;
            azz[(p, p)] -= inv3;
        }
    }
    Ok(CouplingMatrices {
        axx,
        axy,
        ayy,
        azz,
        beta,
    })
}

/// Eigen-decomposition of `A^zz`, modes sorted by descending eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct AxialSpectrum {
    /// Dimensionless eigenvalues `μ_{z,k}`.
    pub mu: Vec<f64>,
    /// Angular frequencies `√μ_{z,k} ω_r` in rad/s (zero for unstable modes).
    pub omega: Vec<f64>,
    /// Column `k` holds the normalized eigenvector of mode `k`.
    pub vectors: DMatrix<f64>,
    pub com_index: usize,
    pub stable: bool,
    pub beta: f64,
    pub omega_r: f64,
}

impl AxialSpectrum {
    pub fn mode_count(&self) -> usize {
        self.mu.len()
    }

    /// Component of mode `k` on ion `n`.
    pub fn component(&self, n: usize, k: usize) -> f64 {
        self.vectors[(n, k)]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.mu.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Spectrum file: `#` header, one `k μ ω/2π[MHz]` row per mode, then the
    /// eigenvector matrix (row `n`, column `k`).
    pub fn to_table(&self) -> String {
        let n = self.mode_count();
        let mut out = String::new();
        let _ = writeln!(out, "# ion_count = {n}");
        let _ = writeln!(out, "# beta = {:e}", self.beta);
        let _ = writeln!(out, "# omega_r = {:e}", self.omega_r);
        let _ = writeln!(out, "# omega_z = {:e}", self.beta * self.omega_r);
        let _ = writeln!(out, "# stable = {}", self.stable);
        let _ = writeln!(out, "# com_index = {}", self.com_index);
        let _ = writeln!(out, "# k\tmu_zk\tfreq_mhz");
        for k in 0..n {
            let _ = writeln!(
                out,
                "{k}\t{:e}\t{:e}",
                self.mu[k],
                crate::constants::angular_to_mhz(self.omega[k])
            );
        }
        let _ = writeln!(out, "# eigenvectors (row = ion, column = mode)");
        for i in 0..n {
            let row: Vec<String> = (0..n).map(|k| format!("{:e}", self.vectors[(i, k)])).collect();
            let _ = writeln!(out, "{}", row.join("\t"));
        }
        out
    }

    /// Parses the output of [`AxialSpectrum::to_table`].
    pub fn from_table(text: &str) -> Result<Self> {
        let err = |line: usize, message: &str| Error::Parse {
            line,
            message: message.to_string(),
        };
        let mut header = std::collections::HashMap::new();
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                if let Some((k, v)) = h.split_once('=') {
                    header.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
                }
                continue;
            }
            let values = line
                .split('\t')
                .map(|s| s.parse::<f64>().map_err(|_| err(i + 1, "invalid number")))
                .collect::<Result<Vec<_>>>()?;
            rows.push((i + 1, values));
        }
        let field = |k: &str| {
            header
                .get(k)
                .cloned()
                .ok_or_else(|| err(0, &format!("missing header field {k}")))
        };
        let (l, v) = field("ion_count")?;
        let n: usize = v.parse().map_err(|_| err(l, "bad ion_count"))?;
        let (l, v) = field("beta")?;
        let beta: f64 = v.parse().map_err(|_| err(l, "bad beta"))?;
        let (l, v) = field("omega_r")?;
        let omega_r: f64 = v.parse().map_err(|_| err(l, "bad omega_r"))?;
        let (l, v) = field("com_index")?;
        let com_index: usize = v.parse().map_err(|_| err(l, "bad com_index"))?;
        if rows.len() != 2 * n {
            return Err(err(0, &format!("expected {} data rows, got {}", 2 * n, rows.len())));
        }
        let mut mu = Vec::with_capacity(n);
        for (k, (line, r)) in rows[..n].iter().enumerate() {
            if r.len() != 3 || r[0] as usize != k {
                return Err(err(*line, "expected `k mu freq` row"));
            }
            mu.push(r[1]);
        }
        let mut vectors = DMatrix::zeros(n, n);
        for (i, (line, r)) in rows[n..].iter().enumerate() {
            if r.len() != n {
                return Err(err(*line, "eigenvector row has wrong length"));
            }
            for k in 0..n {
                vectors[(i, k)] = r[k];
            }
        }
        let stable = mu.iter().all(|&m| m > 0.0);
        Ok(Self {
            omega: mu.iter().map(|&m| m.max(0.0).sqrt() * omega_r).collect(),
            mu,
            vectors,
            com_index,
            stable,
            beta,
            omega_r,
        })
    }
}

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m, f64::EPSILON, 100_000).ok_or(Error::EigenFailure)
}

/// Diagonalizes `A^zz`. A spectrum with any `μ ≤ 0` is returned with
/// `stable = false`.
pub fn axial_spectrum(matrices: &CouplingMatrices, config: &TrapConfig) -> Result<AxialSpectrum> {
    let n = matrices.ion_count();
    let eig = eigen(matrices.azz.clone())?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut vectors = DMatrix::zeros(n, n);
    let mut mu = Vec::with_capacity(n);
    for (k, &src) in order.iter().enumerate() {
        mu.push(eig.eigenvalues[src]);
        let mut v: Vec<f64> = eig.eigenvectors.column(src).iter().copied().collect();
        fix_sign(&mut v);
        for i in 0..n {
            vectors[(i, k)] = v[i];
        }
    }
    let uniform = 1.0 / (n as f64).sqrt();
    let com_index = (0..n)
        .map(|k| (k, (0..n).map(|i| vectors[(i, k)] * uniform).sum::<f64>().abs()))
        .fold((0, -1.0), |acc, (k, o)| if o > acc.1 + 1e-12 { (k, o) } else { acc })
        .0;
    let stable = mu.iter().all(|&m| m > 0.0);
    Ok(AxialSpectrum {
        omega: mu.iter().map(|&m| m.max(0.0).sqrt() * config.omega_r).collect(),
        mu,
        vectors,
        com_index,
        stable,
        beta: matrices.beta,
        omega_r: config.omega_r,
    })
}

/// Largest-magnitude component positive; the lowest index wins ties.
fn fix_sign(v: &mut [f64]) {
    let big = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() >= big * (1.0 - 1e-9)) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Eigenvalues of the in-plane block, ascending.
pub fn planar_spectrum(matrices: &CouplingMatrices) -> Result<Vec<f64>> {
    let eig = eigen(matrices.planar_block())?;
    let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

fn min_axial_eigenvalue(base: &CouplingMatrices, beta: f64) -> Result<f64> {
    let azz = base.with_beta(beta).azz;
    let eig = eigen(azz)?;
    Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Smallest anisotropy `β = ω_z/ω_r` keeping every axial eigenvalue positive.
///
/// The planar equilibrium does not depend on β, so the crystal is solved once
/// and only the diagonal of `A^zz` moves during the bisection.
pub fn critical_beta<F>(n: usize, crystal_provider: F) -> Result<f64>
where
    F: FnOnce(usize) -> Result<Crystal>,
{
    if n <= 1 {
        return Ok(0.0);
    }
    let crystal = crystal_provider(n)?;
    let base = build_matrices(&crystal, 1.0)?;
    if n == 2 {
        // β² equals twice the axial coupling of the pair.
        return Ok((2.0 * base.azz[(0, 1)]).sqrt());
    }
    let mut lo = 0.1;
    let mut hi = (1.2 * 1.073 * ((n - 2) as f64).powf(0.55)).sqrt();
    if min_axial_eigenvalue(&base, lo)? >= 0.0 {
        return Err(Error::BracketFailure { lo, hi });
    }
    let mut expansions = 0;
    while min_axial_eigenvalue(&base, hi)? <= 0.0 {
        expansions += 1;
        if expansions > 30 {
            return Err(Error::BracketFailure { lo, hi });
        }
        lo = hi;
        hi *= 1.5;
    }
    while hi - lo >= 1e-9 {
        let mid = 0.5 * (lo + hi);
        if min_axial_eigenvalue(&base, mid)? > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Splitting between the center-of-mass mode and the next axial mode, rad/s.
pub fn com_gap(spectrum: &AxialSpectrum) -> Result<f64> {
    if !spectrum.stable {
        return Err(Error::UnstableSpectrum(spectrum.min_eigenvalue()));
    }
    let com = spectrum.omega[spectrum.com_index];
    let next = spectrum
        .omega
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != spectrum.com_index)
        .map(|(_, w)| *w)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(com - next)
}
