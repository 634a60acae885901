//! Double-exponential quadrature used as an independent KL oracle.
//! Normalizers are integrated numerically too, so no gamma-function code is shared
//! with the closed forms under test.

use std::f64::consts::FRAC_PI_2;

const STEP: f64 = 1.0 / 64.0;
const SPAN: f64 = 6.0;

/// `∫_0^∞ f(x) dx` via `x = exp(π/2 · sinh t)`.
fn half_line(f: impl Fn(f64) -> f64) -> f64 {
    let mut total = 0.0;
    let steps = (SPAN / STEP) as i64;
    for k in -steps..=steps {
        let t = k as f64 * STEP;
        let u = FRAC_PI_2 * t.sinh();
        let x = u.exp();
        if x == 0.0 || !x.is_finite() {
            continue;
        }
        let v = f(x) * x * FRAC_PI_2 * t.cosh();
        if v.is_finite() {
            total += v;
        }
    }
    total * STEP
}

/// `∫_0^1 f(x, 1 − x) dx` via `x = 1 / (1 + exp(−π sinh t))`.
fn unit_interval(f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut total = 0.0;
    let steps = (SPAN / STEP) as i64;
    for k in -steps..=steps {
        let t = k as f64 * STEP;
        let s = std::f64::consts::PI * t.sinh();
        let x = 1.0 / (1.0 + (-s).exp());
        let y = 1.0 / (1.0 + s.exp());
        if x == 0.0 || y == 0.0 {
            continue;
        }
        // dx/dt = π cosh t · x · (1 − x)
        let v = f(x, y) * std::f64::consts::PI * t.cosh() * x * y;
        if v.is_finite() {
            total += v;
        }
    }
    total * STEP
}

/// KL(Gamma(a1, rate b1) ‖ Gamma(a2, rate b2)) by quadrature.
pub fn gamma_kl(a1: f64, b1: f64, a2: f64, b2: f64) -> f64 {
    let log_g1 = |x: f64| (a1 - 1.0) * x.ln() - b1 * x;
    let log_g2 = |x: f64| (a2 - 1.0) * x.ln() - b2 * x;
    // Scale so the unnormalized density peaks near 1.
    let shift1 = log_g1(((a1 - 1.0).max(0.0) / b1).max(1e-300));
    let shift2 = log_g2(((a2 - 1.0).max(0.0) / b2).max(1e-300));
    let shift1 = if shift1.is_finite() { shift1 } else { 0.0 };
    let shift2 = if shift2.is_finite() { shift2 } else { 0.0 };
    let z1 = half_line(|x| (log_g1(x) - shift1).exp());
    let z2 = half_line(|x| (log_g2(x) - shift2).exp());
    let cross = half_line(|x| {
        let l1 = log_g1(x);
        (l1 - shift1).exp() * (l1 - log_g2(x))
    });
    cross / z1 - shift1 - z1.ln() + shift2 + z2.ln()
}

/// KL(Beta(a1, b1) ‖ Beta(a2, b2)) by quadrature.
pub fn beta_kl(a1: f64, b1: f64, a2: f64, b2: f64) -> f64 {
    let log_g1 = |x: f64, y: f64| (a1 - 1.0) * x.ln() + (b1 - 1.0) * y.ln();
    let log_g2 = |x: f64, y: f64| (a2 - 1.0) * x.ln() + (b2 - 1.0) * y.ln();
    let z1 = unit_interval(|x, y| log_g1(x, y).exp());
    let z2 = unit_interval(|x, y| log_g2(x, y).exp());
    let cross = unit_interval(|x, y| {
        let l1 = log_g1(x, y);
        l1.exp() * (l1 - log_g2(x, y))
    });
    cross / z1 - z1.ln() + z2.ln()
}
