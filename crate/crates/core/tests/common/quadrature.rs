//! Adaptive Gauss–Kronrod quadrature used as an independent check on the
//! closed-form gate integrals.

use gatelab::dynamics::PulseSchedule;
use num_complex::Complex64 as C64;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One 15-point Kronrod rule on `[a, b]`; returns the estimate and the
/// difference from the embedded 7-point Gauss rule.
pub fn gk15<F: FnMut(f64) -> C64>(f: &mut F, a: f64, b: f64) -> (C64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += pair * WGK[j];
        if j % 2 == 1 {
            gauss += pair * WG[j / 2];
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).norm())
}

/// Recursive bisection until the Gauss–Kronrod difference on each piece
/// falls below its share of `tol`.
pub fn adaptive<F: FnMut(f64) -> C64>(f: &mut F, a: f64, b: f64, tol: f64) -> C64 {
    fn recurse<F: FnMut(f64) -> C64>(f: &mut F, a: f64, b: f64, tol: f64, depth: u32) -> C64 {
        let mid = 0.5 * (a + b);
        let (left, el) = gk15(f, a, mid);
        let (right, er) = gk15(f, mid, b);
        if el + er <= tol || depth > 40 {
            return left + right;
        }
        recurse(f, a, mid, 0.5 * tol, depth + 1) + recurse(f, mid, b, 0.5 * tol, depth + 1)
    }
    recurse(f, a, b, tol, 0)
}

/// `i c ∫₀^τ Ω(t) sin(μt) e^{iωt} dt`, segment by segment.
pub fn alpha(schedule: &PulseSchedule, omega: f64, coupling: f64, rel_tol: f64) -> C64 {
    let b = schedule.bounds();
    let mu = schedule.mu;
    let mut total = C64::new(0.0, 0.0);
    for (p, amp) in schedule.amplitudes.iter().enumerate() {
        let scale = amp.abs() * (b[p + 1] - b[p]);
        let mut f = |t: f64| C64::from_polar(amp * (mu * t).sin(), omega * t);
        total += adaptive(&mut f, b[p], b[p + 1], rel_tol * scale.max(f64::MIN_POSITIVE));
    }
    C64::new(0.0, coupling) * total
}

/// `2 Σ_k c_l^k c_n^k ∫₀^τ dt₂ ∫₀^{t₂} dt₁ F(t₂) F(t₁) sin(ω_k(t₂ − t₁))` with
/// `F(t) = Ω(t) sin(μt)`.
///
/// The sine is split as `sin ωt₂ cos ωt₁ − cos ωt₂ sin ωt₁`, so the inner
/// integral is one complex running integral `∫₀^t F e^{iωt₁}`. It is carried
/// across panels short enough (a quarter radian of the fastest oscillation)
/// that a single Kronrod rule on a partial panel is exact to round-off.
pub fn phi(schedule: &PulseSchedule, omegas: &[f64], products: &[f64]) -> f64 {
    let b = schedule.bounds();
    let mu = schedule.mu;
    let mut total = 0.0;
    for (&w, &cc) in omegas.iter().zip(products) {
        if cc == 0.0 {
            continue;
        }
        let drive = |t: f64| {
            let seg = b.partition_point(|x| *x <= t).clamp(1, schedule.segments()) - 1;
            schedule.amplitudes[seg] * (mu * t).sin()
        };
        let mut running = C64::new(0.0, 0.0);
        let mut outer = 0.0;
        for p in 0..schedule.segments() {
            let (a, e) = (b[p], b[p + 1]);
            let panels = (((w + mu) * (e - a)) / 0.25).ceil().max(1.0) as usize;
            let h = (e - a) / panels as f64;
            for j in 0..panels {
                let lo = a + h * j as f64;
                let hi = if j + 1 == panels { e } else { lo + h };
                let mut integrand = |t2: f64| {
                    let (partial, _) = gk15(&mut |t1: f64| C64::from_polar(drive(t1), w * t1), lo, t2);
                    let inner = running + partial;
                    // Im(e^{iωt₂} conj(inner)) = sin ωt₂ C − cos ωt₂ S.
                    C64::new(drive(t2) * (C64::from_polar(1.0, w * t2) * inner.conj()).im, 0.0)
                };
                outer += gk15(&mut integrand, lo, hi).0.re;
                running += gk15(&mut |t1: f64| C64::from_polar(drive(t1), w * t1), lo, hi).0;
            }
        }
        total += 2.0 * cc * outer;
    }
    total
}

