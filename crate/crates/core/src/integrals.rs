//! Closed-form time integrals of a piecewise-constant sine drive.
//!
//! On a segment `[a, b]` the drive is `sin(μt)`. The two quantities the gate
//! needs are
//!
//! ```text
//! A(ω)  = ∫_a^b sin(μt) e^{iωt} dt
//! D(ω)  = Im ∫_a^b dt₂ sin(μt₂) e^{iωt₂} ∫_a^{t₂} sin(μt₁) e^{−iωt₁} dt₁
//! ```
//!
//! Both reduce to divided differences of `e^{iz}` on at most three nodes,
//! which stay well conditioned through the resonance `μ = ω`.

use num_complex::Complex64 as C64;

const I: C64 = C64::new(0.0, 1.0);

/// `sin(w)/w`, with the removable singularity filled in.
pub fn sinc(w: f64) -> f64 {
    if w.abs() < 1e-4 {
        let w2 = w * w;
        1.0 - w2 / 6.0 + w2 * w2 / 120.0
    } else {
        w.sin() / w
    }
}

fn cis(x: f64) -> C64 {
    let (s, c) = x.sin_cos();
    C64::new(c, s)
}

/// First divided difference of `e^{iz}` on nodes `p`, `q` (the derivative
/// when they coincide).
fn exp_dd1(p: f64, q: f64) -> C64 {
    I * cis(0.5 * (p + q)) * sinc(0.5 * (q - p))
}

/// Second divided difference of `e^{iz}` on three real nodes.
fn exp_dd2(z: [f64; 3]) -> C64 {
    let mut z = z;
    z.sort_by(f64::total_cmp);
    let [a, b, c] = z;
    if c - a >= 0.5 {
        return (exp_dd1(b, c) - exp_dd1(a, b)) / (c - a);
    }
    // Clustered nodes: expand about the centroid. The divided difference of
    // w^n on three nodes is the complete homogeneous polynomial h_{n-2}.
    let center = (a + b + c) / 3.0;
    let w = [a - center, b - center, c - center];
    // h1[k] = h_k(w0, w1), h2[k] = h_k(w0, w1, w2), built incrementally.
    let mut pow0 = 1.0;
    let mut h1_prev = 0.0;
    let mut h2_prev = 0.0;
    let mut sum = C64::new(0.0, 0.0);
    let mut ipow = C64::new(-1.0, 0.0); // i^2
    let mut fact = 2.0; // 2!
    // |h_k| ≤ C(k+2, 2) r^k bounds every later term; h_1 vanishes for
    // centered nodes, so individual terms say nothing about convergence.
    let r = w.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let mut rpow = 1.0;
    for k in 0..60 {
        let h1 = if k == 0 { 1.0 } else { pow0 + w[1] * h1_prev };
        let h2 = if k == 0 { 1.0 } else { h1 + w[2] * h2_prev };
        sum += ipow * (h2 / fact);
        let binom = ((k + 2) * (k + 1)) as f64 / 2.0;
        if binom * rpow * r / ((k + 3) as f64 * fact) < 1e-18 * sum.norm() {
            break;
        }
        rpow *= r;
        pow0 *= w[0];
        h1_prev = h1;
        h2_prev = h2;
        ipow *= I;
        fact *= (k + 3) as f64;
    }
    cis(center) * sum
}

/// `∫₀¹ e^{ixu} du`.
pub fn phi1(x: f64) -> C64 {
    cis(0.5 * x) * sinc(0.5 * x)
}

/// `∫₀¹ e^{ixu} ∫₀ᵘ e^{iyv} dv du`.
pub fn phi2(x: f64, y: f64) -> C64 {
    -exp_dd2([0.0, x, x + y])
}

/// `∫_a^b e^{iνt} dt`.
pub fn exp_integral(nu: f64, a: f64, b: f64) -> C64 {
    let dt = b - a;
    dt * cis(nu * a) * phi1(nu * dt)
}

/// `∫_a^b sin(μt) e^{iωt} dt`.
pub fn segment_amplitude(mu: f64, omega: f64, a: f64, b: f64) -> C64 {
    (exp_integral(omega + mu, a, b) - exp_integral(omega - mu, a, b)) / (2.0 * I)
}

/// `∫_a^b dt₂ e^{iλ₂t₂} ∫_a^{t₂} e^{iλ₁t₁} dt₁`.
fn nested_exp(l2: f64, l1: f64, a: f64, b: f64) -> C64 {
    let dt = b - a;
    cis((l1 + l2) * a) * (dt * dt) * phi2(l2 * dt, l1 * dt)
}

/// Same-segment part of the entangling-phase kernel:
/// `Im ∫_a^b dt₂ sin(μt₂)e^{iωt₂} ∫_a^{t₂} sin(μt₁)e^{−iωt₁} dt₁`.
pub fn segment_self_kernel(mu: f64, omega: f64, a: f64, b: f64) -> f64 {
    let up = omega + mu;
    let down = omega - mu;
    let total = nested_exp(up, -down, a, b) - nested_exp(up, -up, a, b) - nested_exp(down, -down, a, b)
        + nested_exp(down, -up, a, b);
    (-0.25 * total).im
}

/// Segment boundaries `t_p = p τ / m`.
pub fn segment_bounds(tau: f64, segments: usize) -> Vec<f64> {
    (0..=segments)
        .map(|p| if p == segments { tau } else { tau * p as f64 / segments as f64 })
        .collect()
}

/// Per-segment amplitudes `A_p(ω)` and the lower-triangular phase kernel
/// `K[p][q]` (`p ≥ q`) of one mode, so that the mode's contribution to the
/// double integral is `Σ_{p,q} Ω_p Ω_q K[p][q]`.
pub fn mode_kernels(mu: f64, omega: f64, bounds: &[f64]) -> (Vec<C64>, Vec<Vec<f64>>) {
    let m = bounds.len() - 1;
    let amps: Vec<C64> = (0..m)
        .map(|p| segment_amplitude(mu, omega, bounds[p], bounds[p + 1]))
        .collect();
    let mut kernel = vec![vec![0.0; m]; m];
    for p in 0..m {
        kernel[p][p] = segment_self_kernel(mu, omega, bounds[p], bounds[p + 1]);
        for q in 0..p {
            kernel[p][q] = (amps[p] * amps[q].conj()).im;
        }
    }
    (amps, kernel)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson on a fine grid, enough for smooth test integrands.
    fn simpson<F: Fn(f64) -> C64>(f: F, a: f64, b: f64, n: usize) -> C64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn phi2_at_origin_is_half() {
        assert!((phi2(0.0, 0.0) - C64::new(0.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn phi2_matches_direct_formula_away_from_resonance() {
        for &(x, y) in &[(3.0, 5.0), (-7.0, 2.5), (100.0, -40.0), (0.3, 0.1), (2.0, -2.0)] {
            // ∫₀¹ e^{ixu} (e^{iyu} − 1)/(iy) du
            let direct = (phi1(x + y) - phi1(x)) / (I * y);
            assert!((phi2(x, y) - direct).norm() < 1e-12 * direct.norm().max(1e-3), "{x} {y}");
        }
    }

    #[test]
    fn phi2_is_continuous_across_node_branches() {
        // The two evaluation branches meet where the node spread is 0.5.
        let a = phi2(0.2499999, 0.2500002);
        let b = phi2(0.2500001, 0.2500001);
        assert!((a - b).norm() < 1e-6);
    }

    #[test]
    fn clustered_nodes_do_not_depend_on_last_bits() {
        // Nodes {0, x, ~0}: the centroid-shifted first-order term is pure
        // rounding noise.
        let x = -0.397_935_069_454_693_5;
        let exact = phi2(x, -x);
        for y in [-x * (1.0 + 1e-15), -x * (1.0 - 1e-15), -x + 1e-17] {
            assert!((phi2(x, y) - exact).norm() < 1e-14);
        }
        let direct = (phi1(0.0) - phi1(x)) / (I * -x);
        assert!((exact - direct).norm() < 1e-13);
    }

    #[test]
    fn amplitude_matches_simpson() {
        let (mu, w, a, b) = (9.0, 10.0, 0.3, 1.7);
        let exact = segment_amplitude(mu, w, a, b);
        let num = simpson(|t| (mu * t).sin() * cis(w * t), a, b, 4000);
        assert!((exact - num).norm() < 1e-10);
    }

    #[test]
    fn resonant_amplitude_matches_simpson() {
        let (w, a, b) = (10.0, 0.0, 2.0);
        let exact = segment_amplitude(w, w, a, b);
        let near = segment_amplitude(w * (1.0 + 1e-12), w, a, b);
        let num = simpson(|t| (w * t).sin() * cis(w * t), a, b, 4000);
        assert!((exact - num).norm() < 1e-10);
        assert!((exact - near).norm() < 1e-9);
    }

    #[test]
    fn self_kernel_matches_nested_simpson() {
        for &(mu, w) in &[(9.0, 10.0), (10.0, 10.0), (3.0, 12.0)] {
            let (a, b) = (0.4, 1.6);
            let inner = |t2: f64| {
                simpson(|t1| (mu * t1).sin() * (w * (t2 - t1)).sin() * C64::new(1.0, 0.0), a, t2, 1200)
            };
            let num = simpson(|t2| (mu * t2).sin() * inner(t2), a, b, 1200).re;
            let exact = segment_self_kernel(mu, w, a, b);
            assert!((exact - num).abs() < 1e-9, "{mu} {w}: {exact} vs {num}");
        }
    }

    #[test]
    fn bounds_partition_exactly() {
        let b = segment_bounds(50e-6, 7);
        assert_eq!(b[0], 0.0);
        assert_eq!(b[7], 50e-6);
        assert!(b.windows(2).all(|w| w[1] > w[0]));
    }
}
