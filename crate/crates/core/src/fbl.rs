//! Finite-blocklength rates under the normal approximation.
//!
//! A packet of `n` channel uses at SINR `gamma` and target error probability
//! `eps` carries approximately
//!
//! ```text
//! B = n log2(1 + gamma) - log2(e) * Qinv(eps) * sqrt(n)
//! ```
//!
//! bits. The dispersion factor is taken as one, so the second-order term does
//! not depend on `gamma`; [`required_sinr`] is therefore an exact closed-form
//! inverse of [`fbl_bits`].

use serde::{Deserialize, Serialize};
use std::f64::consts::{LOG2_E, SQRT_2};

use crate::error::{Error, Result};

/// QoS target of one URLLC user for one mini-slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UrllcRequirement {
    pub bits: f64,
    pub eps: f64,
    pub n: f64,
    /// Linear SINR needed to deliver `bits` within `n` symbols at error `eps`.
    pub gamma_req: f64,
}

impl UrllcRequirement {
    pub fn new(bits: f64, eps: f64, n: f64) -> Result<Self> {
        if !(bits >= 0.0) {
            return Err(Error::OutOfRange(format!("required bits {bits} < 0")));
        }
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::OutOfRange(format!("eps {eps} not in (0, 0.5)")));
        }
        if !(n >= 1.0) {
            return Err(Error::OutOfRange(format!("blocklength {n} < 1")));
        }
        let gamma_req = required_sinr(bits, n, eps)?;
        Ok(Self {
            bits,
            eps,
            n,
            gamma_req,
        })
    }
}

/// Inverse of the Gaussian tail function `Q(x) = P(Z > x)`.
pub fn q_inv(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::OutOfRange(format!("q_inv argument {eps} not in (0, 1)")));
    }
    // Q^{-1}(eps) = Phi^{-1}(1 - eps) = -Phi^{-1}(eps)
    Ok(-normal_quantile(eps))
}

/// Standard normal quantile: Acklam's rational approximation followed by
/// two Newton steps on `Phi(x) - p`.
fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549671010243726e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let mut x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    for _ in 0..2 {
        // Work with the smaller tail to keep relative accuracy.
        let err = if x < 0.0 {
            normal_cdf(x) - p
        } else {
            (1.0 - p) - normal_tail(x)
        };
        let pdf = normal_pdf(x);
        if pdf > 0.0 {
            x -= err / pdf;
        }
    }
    x
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// `Q(x) = P(Z > x)`.
pub fn normal_tail(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// Complementary error function with ~1e-15 relative accuracy
/// (Chebyshev fit from Numerical Recipes, 3rd ed., `erfccheb`).
fn erfc(z: f64) -> f64 {
    if z < 0.0 {
        return 2.0 - erfc(-z);
    }
    const COF: [f64; 28] = [
        -1.3026537197817094,
        6.4196979235649026e-1,
        1.9476473204185836e-2,
        -9.561514786808631e-3,
        -9.46595344482036e-4,
        3.66839497852761e-4,
        4.2523324806907e-5,
        -2.0278578112534e-5,
        -1.624290004647e-6,
        1.303655835580e-6,
        1.5626441722e-8,
        -8.5238095915e-8,
        6.529054439e-9,
        5.059343495e-9,
        -9.91364156e-10,
        -2.27365122e-10,
        9.6467911e-11,
        2.394038e-12,
        -6.886027e-12,
        8.94487e-13,
        3.13092e-13,
        -1.12708e-13,
        3.81e-16,
        7.106e-15,
        -1.523e-15,
        -9.4e-17,
        1.21e-16,
        -2.8e-17,
    ];
    let t = 2.0 / (2.0 + z);
    let ty = 4.0 * t - 2.0;
    let mut d = 0.0;
    let mut dd = 0.0;
    for &c in COF[1..].iter().rev() {
        let tmp = d;
        d = ty * d - dd + c;
        dd = tmp;
    }
    t * (-z * z + 0.5 * (COF[0] + ty * d) - dd).exp()
}

/// Bits deliverable at SINR `gamma` (may be negative for tiny `gamma`).
pub fn fbl_bits(gamma: f64, n: f64, eps: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::OutOfRange(format!("gamma {gamma} < 0")));
    }
    if !(n >= 1.0) {
        return Err(Error::OutOfRange(format!("blocklength {n} < 1")));
    }
    Ok(n * gamma.ln_1p() * LOG2_E - LOG2_E * q_inv(eps)? * n.sqrt())
}

/// Smallest linear SINR at which [`fbl_bits`] reaches `bits`.
pub fn required_sinr(bits: f64, n: f64, eps: f64) -> Result<f64> {
    if !(bits >= 0.0) {
        return Err(Error::OutOfRange(format!("required bits {bits} < 0")));
    }
    if !(n >= 1.0) {
        return Err(Error::OutOfRange(format!("blocklength {n} < 1")));
    }
    let exponent = (bits + LOG2_E * q_inv(eps)? * n.sqrt()) / n;
    // 2^x - 1 without cancellation for small x
    Ok((exponent * std::f64::consts::LN_2).exp_m1().max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Q(x) by adaptive Simpson quadrature of the Gaussian density over [x, x+40].
    fn tail_by_quadrature(x: f64) -> f64 {
        #[allow(clippy::too_many_arguments)]
        fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let lm = 0.5 * (a + m);
            let rm = 0.5 * (m + b);
            let flm = f(lm);
            let frm = f(rm);
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            let delta = left + right - whole;
            if depth == 0 || delta.abs() <= 15.0 * tol {
                left + right + delta / 15.0
            } else {
                simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                    + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let f = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let (a, b) = (x, x + 40.0);
        let m = 0.5 * (a + b);
        let whole = (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b));
        // error budget relative to the size of the tail
        let tol = 1e-13 * f(x) / (x.abs() + 1.0);
        simpson(&f, a, b, f(a), f(m), f(b), whole, tol, 30)
    }

    fn bisect(mut lo: f64, mut hi: f64, g: impl Fn(f64) -> f64) -> f64 {
        let glo = g(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (g(mid) > 0.0) == (glo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn q_inv_median_is_zero() {
        assert!(q_inv(0.5).unwrap().abs() < 1e-15);
    }

    #[test]
    fn q_inv_matches_bisection_on_tail_integral() {
        let oracle = bisect(0.0, 10.0, |x| tail_by_quadrature(x) - 1e-6);
        assert!((oracle - 4.753424308822899).abs() < 1e-9, "oracle {oracle}");
        let q = q_inv(1e-6).unwrap();
        assert!((q - oracle).abs() < 1e-9, "{q} vs {oracle}");
        for &eps in &[1e-9, 1e-5, 1e-3, 0.01, 0.1, 0.3, 0.45] {
            let oracle = bisect(-1.0, 10.0, |x| tail_by_quadrature(x) - eps);
            assert!((q_inv(eps).unwrap() - oracle).abs() < 1e-9, "eps {eps}");
        }
    }

    #[test]
    fn q_inv_is_antisymmetric() {
        for &eps in &[1e-8, 1e-4, 0.02, 0.2, 0.4] {
            let a = q_inv(eps).unwrap();
            let b = q_inv(1.0 - eps).unwrap();
            // 1 - eps itself carries a rounding error of about 1e-16
            assert!((a + b).abs() < 1e-10 + 1e-16 / eps, "{eps}: {a} {b}");
        }
    }

    #[test]
    fn q_inv_rejects_out_of_range() {
        assert!(q_inv(0.0).is_err());
        assert!(q_inv(1.0).is_err());
        assert!(q_inv(-0.1).is_err());
        assert!(q_inv(f64::NAN).is_err());
    }

    #[test]
    fn fbl_bits_trivial_points() {
        assert!(fbl_bits(0.0, 84.0, 0.5).unwrap().abs() < 1e-12);
        assert!((fbl_bits(1.0, 84.0, 0.5).unwrap() - 84.0).abs() < 1e-12);
    }

    #[test]
    fn required_sinr_for_180_bits_matches_bisection() {
        let oracle = bisect(0.0, 100.0, |g| fbl_bits(g, 84.0, 1e-6).unwrap() - 180.0);
        let gamma = required_sinr(180.0, 84.0, 1e-6).unwrap();
        assert!(((gamma - oracle) / oracle).abs() < 1e-10, "{gamma} vs {oracle}");
        // frozen from the bisection oracle
        assert!((gamma - 6.418348801675098).abs() < 1e-9, "{gamma}");
        assert!((10.0 * gamma.log10() - 8.07).abs() < 0.01);
        assert!((fbl_bits(gamma, 84.0, 1e-6).unwrap() - 180.0).abs() < 1e-9);
    }

    #[test]
    fn required_sinr_zero_bits_at_median() {
        assert_eq!(required_sinr(0.0, 84.0, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn round_trip_over_bit_range() {
        for &n in &[50.0, 84.0, 200.0] {
            for &eps in &[1e-3, 1e-6] {
                for b in 1..=500 {
                    let b = b as f64;
                    let g = required_sinr(b, n, eps).unwrap();
                    let back = fbl_bits(g, n, eps).unwrap();
                    assert!((back - b).abs() <= 1e-9, "n={n} eps={eps} b={b} back={back}");
                }
            }
        }
    }

    #[test]
    fn monotonicity() {
        let mut prev = f64::NEG_INFINITY;
        for i in 0..200 {
            let g = 0.1 + 0.25 * i as f64;
            let b = fbl_bits(g, 84.0, 1e-6).unwrap();
            assert!(b > prev);
            // longer blocks help once the capacity term beats the dispersion penalty
            if g >= 1.0 {
                assert!(fbl_bits(g, 85.0, 1e-6).unwrap() > b);
            }
            prev = b;
        }
        let mut prev = -1.0;
        for b in (0..400).step_by(7) {
            let g = required_sinr(b as f64, 84.0, 1e-6).unwrap();
            assert!(g > prev);
            assert!(required_sinr(b as f64, 84.0, 1e-3).unwrap() < g);
            prev = g;
        }
    }

    #[test]
    fn requirement_validation() {
        assert!(UrllcRequirement::new(180.0, 1e-6, 84.0).is_ok());
        assert!(UrllcRequirement::new(-1.0, 1e-6, 84.0).is_err());
        assert!(UrllcRequirement::new(10.0, 0.6, 84.0).is_err());
        assert!(UrllcRequirement::new(10.0, 1e-6, 0.5).is_err());
    }
}
