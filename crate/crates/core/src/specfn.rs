//! Special functions and stable nonlinearities.
//!
//! `lgamma`, `digamma` and `trigamma` shift the argument upward with the
//! recurrence relations until it clears [`ASYMPTOTIC_THRESHOLD`], then sum
//! the Stirling/Bernoulli asymptotic series. Around the two roots of
//! `ln Γ` (x = 1 and x = 2) a zeta-function Taylor series is used instead so
//! the result keeps relative accuracy where the value itself is tiny.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("argument must be finite and strictly positive, got {0}")]
    NotPositive(f64),
    #[error("argument must be finite, got {0}")]
    NotFinite(f64),
    #[error("empty input vector")]
    Empty,
}

/// A finite, strictly positive real.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PositiveReal<T>(T);

impl<T: Scalar> PositiveReal<T> {
    pub fn new(value: T) -> Result<Self, DomainError> {
        if value.is_finite() && value > T::zero() {
            Ok(Self(value))
        } else {
            Err(DomainError::NotPositive(value.as_f64()))
        }
    }

    #[inline]
    pub fn get(self) -> T {
        self.0
    }
}

pub const ASYMPTOTIC_THRESHOLD: f64 = 10.0;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// zeta(k) for k = 2..=31.
const ZETA: [f64; 30] = [
    1.644934066848226436472,
    1.2020569031595942854,
    1.082323233711138191516,
    1.036927755143369926331,
    1.017343061984449139715,
    1.00834927738192282684,
    1.004077356197944339379,
    1.002008392826082214418,
    1.000994575127818085337,
    1.000494188604119464559,
    1.000246086553308048299,
    1.000122713347578489147,
    1.000061248135058704829,
    1.000030588236307020494,
    1.000015282259408651872,
    1.000007637197637899762,
    1.00000381729326499984,
    1.000001908212716553939,
    1.000000953962033872796,
    1.000000476932986787806,
    1.000000238450502727733,
    1.000000119219925965311,
    1.000000059608189051259,
    1.000000029803503514652,
    1.000000014901554828365,
    1.000000007450711789835,
    1.000000003725334024788,
    1.000000001862659723513,
    1.00000000093132743242,
    1.000000000465662906503,
];

/// Half-width of the Taylor neighbourhoods around 1 and 2.
const ROOT_WINDOW: f64 = 0.2;

/// ln Γ(1 + z) for |z| <= ROOT_WINDOW.
fn ln_gamma_1p_series<T: Scalar>(z: T) -> T {
    // -γ z + Σ_{k>=2} (-1)^k ζ(k) z^k / k, summed from the small end.
    let mut powers = [T::zero(); 30];
    let mut p = z;
    for slot in powers.iter_mut() {
        p = p * z;
        *slot = p;
    }
    let mut acc = T::zero();
    for (i, &zeta) in ZETA.iter().enumerate().rev() {
        let k = i + 2;
        let term = T::lit(zeta / k as f64) * powers[i];
        acc = if k % 2 == 0 { acc + term } else { acc - term };
    }
    acc - T::lit(EULER_GAMMA) * z
}

fn ln_gamma_stirling<T: Scalar>(x: T) -> T {
    let inv = x.recip();
    let inv2 = inv * inv;
    let series = inv
        * (T::lit(1.0 / 12.0)
            + inv2
                * (T::lit(-1.0 / 360.0)
                    + inv2
                        * (T::lit(1.0 / 1260.0)
                            + inv2
                                * (T::lit(-1.0 / 1680.0)
                                    + inv2
                                        * (T::lit(1.0 / 1188.0)
                                            + inv2
                                                * (T::lit(-691.0 / 360360.0)
                                                    + inv2
                                                        * (T::lit(1.0 / 156.0)
                                                            + inv2 * T::lit(-3617.0 / 122400.0))))))));
    (x - T::lit(0.5)) * x.ln() - x + T::lit(HALF_LN_2PI) + series
}

pub(crate) fn ln_gamma_unchecked<T: Scalar>(x: T) -> T {
    let window = T::lit(ROOT_WINDOW);
    let one = T::one();
    let two = T::lit(2.0);
    if (x - one).abs() <= window {
        return ln_gamma_1p_series(x - one);
    }
    if (x - two).abs() <= window {
        let z = x - two;
        return ln_gamma_1p_series(z) + z.ln_1p();
    }
    let threshold = T::lit(ASYMPTOTIC_THRESHOLD);
    if x >= threshold {
        return ln_gamma_stirling(x);
    }
    // ln Γ(x) = ln Γ(x + k) - ln(x (x+1) ... (x+k-1))
    let mut shifted = x;
    let mut product = one;
    while shifted < threshold {
        product = product * shifted;
        shifted = shifted + one;
    }
    ln_gamma_stirling(shifted) - product.ln()
}

pub(crate) fn digamma_unchecked<T: Scalar>(x: T) -> T {
    let threshold = T::lit(ASYMPTOTIC_THRESHOLD);
    let mut shifted = x;
    let mut acc = T::zero();
    while shifted < threshold {
        acc = acc - shifted.recip();
        shifted = shifted + T::one();
    }
    let inv = shifted.recip();
    let inv2 = inv * inv;
    let series = inv2
        * (T::lit(1.0 / 12.0)
            - inv2
                * (T::lit(1.0 / 120.0)
                    - inv2
                        * (T::lit(1.0 / 252.0)
                            - inv2
                                * (T::lit(1.0 / 240.0)
                                    - inv2
                                        * (T::lit(1.0 / 132.0)
                                            - inv2
                                                * (T::lit(691.0 / 32760.0)
                                                    - inv2 * T::lit(1.0 / 12.0)))))));
    acc + shifted.ln() - T::lit(0.5) * inv - series
}

pub(crate) fn trigamma_unchecked<T: Scalar>(x: T) -> T {
    let threshold = T::lit(ASYMPTOTIC_THRESHOLD);
    let mut shifted = x;
    let mut acc = T::zero();
    while shifted < threshold {
        acc = acc + (shifted * shifted).recip();
        shifted = shifted + T::one();
    }
    let inv = shifted.recip();
    let inv2 = inv * inv;
    let series = inv
        * inv2
        * (T::lit(1.0 / 6.0)
            - inv2
                * (T::lit(1.0 / 30.0)
                    - inv2
                        * (T::lit(1.0 / 42.0)
                            - inv2
                                * (T::lit(1.0 / 30.0)
                                    - inv2
                                        * (T::lit(5.0 / 66.0)
                                            - inv2
                                                * (T::lit(691.0 / 2730.0)
                                                    - inv2 * T::lit(7.0 / 6.0)))))));
    acc + inv + T::lit(0.5) * inv2 + series
}

/// ln Γ(x).
pub fn lgamma<T: Scalar>(x: PositiveReal<T>) -> T {
    ln_gamma_unchecked(x.get())
}

/// ψ(x) = d/dx ln Γ(x).
pub fn digamma<T: Scalar>(x: PositiveReal<T>) -> T {
    digamma_unchecked(x.get())
}

/// ψ₁(x) = d/dx ψ(x).
pub fn trigamma<T: Scalar>(x: PositiveReal<T>) -> T {
    trigamma_unchecked(x.get())
}

/// Checked convenience wrappers over raw scalars.
pub fn ln_gamma<T: Scalar>(x: T) -> Result<T, DomainError> {
    PositiveReal::new(x).map(lgamma)
}

pub fn psi<T: Scalar>(x: T) -> Result<T, DomainError> {
    PositiveReal::new(x).map(digamma)
}

pub fn psi1<T: Scalar>(x: T) -> Result<T, DomainError> {
    PositiveReal::new(x).map(trigamma)
}

/// ln(1 + eˣ) without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// ln σ(x) = -softplus(-x); stays finite for very negative x.
#[inline]
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    -softplus(-x)
}

/// Max-shifted softmax.
pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>, DomainError> {
    if v.is_empty() {
        return Err(DomainError::Empty);
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(DomainError::NotFinite(bad.as_f64()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in v.iter_mut() {
        *x = *x / total;
    }
}

/// Softmax restricted to entries where `mask` is true; masked entries are
/// exactly zero. Returns `None` when nothing is unmasked.
pub fn softmax_masked<T: Scalar>(v: &[T], mask: &[bool]) -> Option<Vec<T>> {
    debug_assert_eq!(v.len(), mask.len());
    let max = v
        .iter()
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|(&x, _)| x)
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return None;
    }
    let mut out: Vec<T> = v
        .iter()
        .zip(mask)
        .map(|(&x, &keep)| if keep { (x - max).exp() } else { T::zero() })
        .collect();
    let total: T = out.iter().copied().sum();
    for x in out.iter_mut() {
        *x = *x / total;
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values from a 40-digit mpmath evaluation.
    const LGAMMA_REF: &[(f64, f64)] = &[
        (0.5, 0.572_364_942_924_700_087_07),
        (1e-3, 6.907_178_885_383_853_661_7),
        (1e6, 12_815_504.569_147_611_66),
        (1.46, -0.121_485_001_004_007_429_45),
        (7.3, 7.147_892_523_022_248_692_1),
        (0.01, 4.599_479_878_042_021_701_6),
        (2.1, 0.045_437_738_544_485_179_002),
        (123.456, 469.605_547_129_929_483_5),
    ];
    const DIGAMMA_REF: &[(f64, f64)] = &[
        (1.0, -0.577_215_664_901_532_860_61),
        (10.0, 2.251_752_589_066_721_107_6),
        (1e-3, -1_000.575_571_931_810_279_7),
        (1e6, 13.815_510_057_964_190_771),
        (1.5, 0.036_489_973_978_576_520_559),
        (0.25, -4.227_453_533_376_265_408_1),
    ];
    const TRIGAMMA_REF: &[(f64, f64)] = &[
        (1.0, 1.644_934_066_848_226_436_5),
        (5.0, 0.221_322_955_737_115_325_36),
        (1e-3, 1_000_001.642_533_195_827_3),
        (0.3, 12.245_364_546_107_731_301),
        (1e6, 1.000_000_500_000_166_666_7e-6),
    ];

    fn pr(x: f64) -> PositiveReal<f64> {
        PositiveReal::new(x).unwrap()
    }

    #[test]
    fn lgamma_examples() {
        assert_eq!(lgamma(pr(1.0)), 0.0);
        assert_eq!(lgamma(pr(2.0)), 0.0);
        assert!((lgamma(pr(0.5)) - 0.5723649429).abs() < 1e-10);
        assert!((lgamma(pr(0.5)) - std::f64::consts::PI.ln() / 2.0).abs() < 1e-13);
    }

    #[test]
    fn lgamma_matches_reference() {
        for &(x, want) in LGAMMA_REF {
            let got = lgamma(pr(x));
            assert!(((got - want) / want).abs() <= 1e-12, "lgamma({x}) = {got}, want {want}");
        }
    }

    #[test]
    fn digamma_matches_reference() {
        for &(x, want) in DIGAMMA_REF {
            let got = digamma(pr(x));
            assert!((got - want).abs() <= 1e-10, "digamma({x}) = {got}, want {want}");
        }
        for x in [0.3_f64, 1.7, 9.2] {
            assert!((digamma(pr(x + 1.0)) - digamma(pr(x)) - 1.0 / x).abs() < 1e-12);
        }
    }

    #[test]
    fn trigamma_matches_reference() {
        for &(x, want) in TRIGAMMA_REF {
            let got = trigamma(pr(x));
            let tol = 1e-9 * want.abs().max(1.0);
            assert!((got - want).abs() <= tol, "trigamma({x}) = {got}, want {want}");
        }
        assert!((trigamma(pr(1.0)) - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-12);
        for x in [0.5_f64, 3.0] {
            assert!((trigamma(pr(x + 1.0)) - trigamma(pr(x)) + 1.0 / (x * x)).abs() < 1e-12);
        }
    }

    #[test]
    fn lgamma_recurrence_over_range() {
        let mut x: f64 = 1e-3;
        while x <= 1e3 {
            let ratio = (lgamma(pr(x + 1.0)) - lgamma(pr(x))).exp();
            assert!(((ratio - x) / x).abs() < 1e-9, "x = {x}");
            x *= 1.37;
        }
    }

    #[test]
    fn lgamma_is_continuous_across_branch_edges() {
        for edge in [0.8_f64, 1.2, 1.8, 2.2, 10.0] {
            let below = ln_gamma_unchecked(edge - 1e-12);
            let above = ln_gamma_unchecked(edge + 1e-12);
            assert!((below - above).abs() < 1e-11, "edge {edge}: {below} vs {above}");
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        let mut x: f64 = 0.1;
        while x <= 100.0 {
            let fd = (ln_gamma_unchecked(x + h) - ln_gamma_unchecked(x - h)) / (2.0 * h);
            assert!((fd - digamma_unchecked(x)).abs() < 1e-6, "digamma at {x}");
            let fd2 = (digamma_unchecked(x + h) - digamma_unchecked(x - h)) / (2.0 * h);
            assert!((fd2 - trigamma_unchecked(x)).abs() < 1e-6 * trigamma_unchecked(x).max(1.0), "trigamma at {x}");
            x *= 1.21;
        }
    }

    #[test]
    fn domain_errors() {
        assert!(ln_gamma(0.0).is_err());
        assert!(ln_gamma(-1.0).is_err());
        assert!(psi(f64::NAN).is_err());
        assert!(psi1(f64::INFINITY).is_err());
        assert!(softmax::<f64>(&[]).is_err());
        assert!(softmax(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.7_f64, 0.7, 0.7]).unwrap();
        for p in u {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[-0.1_f64, -4.9]).unwrap();
        assert!((p[0] - 0.99184).abs() < 5e-6);
        assert!((p[1] - 0.00816).abs() < 5e-6);
        let v = [0.3, -2.0, 5.5, 1.25];
        let a = softmax(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + 17.0).collect();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_masked_zeroes_masked_entries() {
        let p = softmax_masked(&[1.0, 1.0, 1.0], &[true, true, false]).unwrap();
        assert_eq!(p, vec![0.5, 0.5, 0.0]);
        assert!(softmax_masked(&[1.0, 2.0], &[false, false]).is_none());
    }

    #[test]
    fn nonlinearities() {
        assert!((softplus(0.0_f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(3.0_f64) - 3.048_587_351_573_742).abs() < 1e-12);
        assert_eq!(softplus(1000.0_f64), 1000.0);
        assert!(softplus(-1000.0_f64) >= 0.0);
        assert_eq!(sigmoid(0.0_f64), 0.5);
        for x in [-30.0_f64, -2.5, 0.1, 7.0] {
            assert!((sigmoid(-x) - (1.0 - sigmoid(x))).abs() < 1e-15);
        }
        let ls = log_sigmoid(-100.0_f64);
        assert!(ls.is_finite());
        assert!((ls + 100.0).abs() < 1e-12);
    }

    #[test]
    fn works_in_single_precision() {
        let x = PositiveReal::new(0.5_f32).unwrap();
        assert!((lgamma(x) - 0.572_364_9).abs() < 1e-5);
        assert!((digamma(PositiveReal::new(1.0_f32).unwrap()) + 0.577_215_7).abs() < 1e-5);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_probability_vector(v in proptest::collection::vec(-50.0f64..50.0, 1..10_000)) {
                let p = softmax(&v).unwrap();
                let total: f64 = p.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|&x| x >= 0.0));
            }
        }
    }
}
