//! Special functions and the univariate distributions built on them.
//!
//! The incomplete gamma and beta functions use the classical series /
//! modified-Lentz continued-fraction split, which keeps relative error near
//! 1e-14 over the parameter ranges used by the pipeline (dof up to ~1e6).
//! Inverses are safeguarded Newton iterations inside a shrinking bracket.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

const EPS: f64 = 1e-16;
const FPMIN: f64 = 1e-300;
const MAX_ITER: usize = 20_000;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn gamma_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut del = 1.0 / a;
    let mut sum = del;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_cont_frac(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / FPMIN;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = b + an / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        1.0 - gamma_cont_frac(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x) = 1 - P(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x < a + 1.0 {
        1.0 - gamma_series(a, x)
    } else {
        gamma_cont_frac(a, x)
    }
}

fn beta_cont_frac(a: f64, b: f64, x: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)` for `x` in `[0, 1]`.
pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (-x).ln_1p();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cont_frac(a, b, x) / a
    } else {
        1.0 - front * beta_cont_frac(b, a, 1.0 - x) / b
    }
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let h = 0.5 * x * x;
    if x < 0.0 {
        0.5 * gamma_q(0.5, h)
    } else {
        0.5 + 0.5 * gamma_p(0.5, h)
    }
}

/// Upper tail `1 - Φ(x)`, accurate for large positive `x`.
pub fn std_normal_sf(x: f64) -> f64 {
    std_normal_cdf(-x)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

// Acklam's rational approximation; refined below with Halley steps.
const ACKLAM_A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_69e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239,
];
const ACKLAM_B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const ACKLAM_C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838,
    -2.549_732_539_343_734,
    4.374_664_141_464_968,
    2.938_163_982_698_783,
];
const ACKLAM_D: [f64; 4] = [
    7.784_695_709_041_462e-3,
    3.224_671_290_700_398e-1,
    2.445_134_137_142_996,
    3.754_408_661_907_416,
];

fn acklam(p: f64) -> f64 {
    let (a, b, c, d) = (ACKLAM_A, ACKLAM_B, ACKLAM_C, ACKLAM_D);
    let p_low = 0.024_25;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
            / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q
            / (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5])
            / ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    }
}

/// Inverse of the standard normal CDF on `(0, 1)`.
pub fn std_normal_inv(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "normal quantile requires p in (0,1), got {p}"
        )));
    }
    if p > 0.5 {
        return Ok(-std_normal_inv(1.0 - p)?);
    }
    let mut x = acklam(p);
    for _ in 0..3 {
        let e = std_normal_cdf(x) - p;
        let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
        let step = u / (1.0 + 0.5 * x * u);
        x -= step;
        if step.abs() <= 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    Ok(x)
}

fn check_dof(nu: f64) -> Result<()> {
    if nu > 0.0 && nu.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "degrees of freedom must be positive and finite, got {nu}"
        )))
    }
}

/// `P(T > x)` for `x >= 0`, computed directly in the tail.
fn student_t_upper_tail(x: f64, nu: f64) -> f64 {
    let x2 = x * x;
    if x2 < nu {
        0.5 - 0.5 * beta_inc(0.5, 0.5 * nu, x2 / (nu + x2))
    } else {
        0.5 * beta_inc(0.5 * nu, 0.5, nu / (nu + x2))
    }
}

pub fn student_t_ln_pdf(x: f64, nu: f64) -> f64 {
    ln_gamma(0.5 * (nu + 1.0))
        - ln_gamma(0.5 * nu)
        - 0.5 * (nu * PI).ln()
        - 0.5 * (nu + 1.0) * (x * x / nu).ln_1p()
}

/// Student's t CDF with `nu` degrees of freedom.
pub fn student_t_cdf(x: f64, nu: f64) -> Result<f64> {
    check_dof(nu)?;
    if x == 0.0 {
        return Ok(0.5);
    }
    if x.is_infinite() {
        return Ok(if x > 0.0 { 1.0 } else { 0.0 });
    }
    let tail = student_t_upper_tail(x.abs(), nu);
    Ok(if x > 0.0 { 1.0 - tail } else { tail })
}

/// Inverse of the Student's t CDF.
pub fn student_t_inv(p: f64, nu: f64) -> Result<f64> {
    check_dof(nu)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "t quantile requires p in (0,1), got {p}"
        )));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    if nu == 1.0 {
        return Ok((PI * (p - 0.5)).tan());
    }
    let (q, sign) = if p < 0.5 { (p, -1.0) } else { (1.0 - p, 1.0) };
    // Solve ln tail(x) = ln q for x > 0; tail is strictly decreasing.
    let target = q.ln();
    let z = -std_normal_inv(q)?;
    let mut x = z + (z * z * z + z) / (4.0 * nu);
    let mut lo = 0.0_f64;
    let mut hi = x.max(1.0);
    while student_t_upper_tail(hi, nu) > q {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Numeric(format!("t quantile bracket overflow (p={p}, nu={nu})")));
        }
    }
    if !(x > lo && x < hi) {
        x = 0.5 * (lo + hi);
    }
    for _ in 0..200 {
        let tail = student_t_upper_tail(x, nu);
        let g = tail.ln() - target;
        if g > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let dg = -student_t_ln_pdf(x, nu).exp() / tail;
        let mut next = x - g / dg;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        let done = (next - x).abs() <= 1e-15 * x.max(1e-300) || hi - lo <= 4.0 * f64::EPSILON * hi;
        x = next;
        if done {
            break;
        }
    }
    Ok(sign * x)
}

/// Chi-squared CDF with `dof` degrees of freedom.
pub fn chi2_cdf(x: f64, dof: f64) -> Result<f64> {
    check_dof(dof)?;
    if x < 0.0 || x.is_nan() {
        return Err(Error::Domain(format!("chi2 CDF requires x >= 0, got {x}")));
    }
    Ok(gamma_p(0.5 * dof, 0.5 * x))
}

/// Inverse of the regularized lower incomplete gamma in `x`.
pub fn gamma_p_inv(a: f64, p: f64) -> Result<f64> {
    if !(a > 0.0) || !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "gamma quantile requires a > 0 and p in (0,1), got a={a}, p={p}"
        )));
    }
    // Wilson-Hilferty start
    let z = std_normal_inv(p)?;
    let c = 1.0 / (9.0 * a);
    let mut x = a * (1.0 - c + z * c.sqrt()).powi(3);
    if !(x > 0.0) {
        x = (p * (ln_gamma(a + 1.0)).exp()).powf(1.0 / a).max(1e-300);
    }
    let mut lo = 0.0_f64;
    let mut hi = x.max(1.0);
    while gamma_p(a, hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    if !(x > lo && x < hi) {
        x = 0.5 * (lo + hi);
    }
    let ln_ga = ln_gamma(a);
    for _ in 0..200 {
        let f = gamma_p(a, x) - p;
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let df = ((a - 1.0) * x.ln() - x - ln_ga).exp();
        let mut next = x - f / df;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        let done = (next - x).abs() <= 1e-15 * x || hi - lo <= 4.0 * f64::EPSILON * hi;
        x = next;
        if done {
            break;
        }
    }
    Ok(x)
}

/// Inverse chi-squared CDF.
pub fn chi2_inv(p: f64, dof: f64) -> Result<f64> {
    check_dof(dof)?;
    Ok(2.0 * gamma_p_inv(0.5 * dof, p)?)
}

/// F-distribution CDF with `(d1, d2)` degrees of freedom.
pub fn f_cdf(x: f64, d1: f64, d2: f64) -> Result<f64> {
    check_dof(d1)?;
    check_dof(d2)?;
    if x < 0.0 || x.is_nan() {
        return Err(Error::Domain(format!("F CDF requires x >= 0, got {x}")));
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    let d1x = d1 * x;
    Ok(beta_inc(0.5 * d1, 0.5 * d2, d1x / (d1x + d2)))
}

/// `erfc` via the upper incomplete gamma; used by tests as a cross-check.
pub fn erfc(x: f64) -> f64 {
    2.0 * std_normal_cdf(-x / FRAC_1_SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson rule; independent of the incomplete-gamma path.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let n = if n % 2 == 1 { n + 1 } else { n };
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        let mut fact = 1.0_f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12, "n={n}");
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn normal_cdf_against_quadrature() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        for &x in &[0.3, 1.0, 1.959964, 2.5, 4.0] {
            let quad = 0.5 + simpson(std_normal_pdf, 0.0, x, 20_000);
            assert!((std_normal_cdf(x) - quad).abs() < 1e-12, "x={x}");
            assert!((std_normal_cdf(-x) - (1.0 - quad)).abs() < 1e-12, "x={x}");
        }
        assert!((std_normal_cdf(1.959964) - 0.975).abs() < 1e-6);
    }

    #[test]
    fn normal_inverse_round_trip() {
        assert_eq!(std_normal_inv(0.5).unwrap(), 0.0);
        let mut p = 1e-8;
        while p < 0.5 {
            let x = std_normal_inv(p).unwrap();
            assert!((std_normal_cdf(x) - p).abs() < 1e-10 * p.max(1e-6), "p={p}");
            let q = 1.0 - p;
            let x = std_normal_inv(q).unwrap();
            assert!((std_normal_cdf(x) - q).abs() < 1e-10, "q={q}");
            p *= 1.37;
        }
        assert!(std_normal_inv(0.0).is_err());
        assert!(std_normal_inv(1.0).is_err());
    }

    #[test]
    fn cauchy_closed_form() {
        for &x in &[-3.0, -1.0, 0.2, 1.0, 7.5] {
            let exact = 0.5 + f64::atan(x) / PI;
            assert!((student_t_cdf(x, 1.0).unwrap() - exact).abs() < 1e-13);
        }
        assert!((student_t_cdf(1.0, 1.0).unwrap() - 0.75).abs() < 1e-14);
    }

    #[test]
    fn t_cdf_against_quadrature() {
        for &nu in &[2.5, 5.0, 10.0, 30.0] {
            for &x in &[0.5, 1.812, 3.0] {
                let quad = 0.5 + simpson(|s| student_t_ln_pdf(s, nu).exp(), 0.0, x, 20_000);
                assert!((student_t_cdf(x, nu).unwrap() - quad).abs() < 1e-11, "nu={nu} x={x}");
            }
        }
    }

    #[test]
    fn t_approaches_normal() {
        let mut x = -4.0;
        while x <= 4.0 {
            let d = (student_t_cdf(x, 1e6).unwrap() - std_normal_cdf(x)).abs();
            assert!(d < 1e-4, "x={x} d={d}");
            x += 0.25;
        }
    }

    #[test]
    fn t_inverse_round_trip() {
        for &nu in &[1.0, 2.1, 3.7, 10.0, 25.0, 200.0] {
            for &p in &[1e-8, 1e-6, 0.001, 0.1, 0.37, 0.5, 0.9, 0.999, 1.0 - 1e-6, 1.0 - 1e-8] {
                let x = student_t_inv(p, nu).unwrap();
                let back = student_t_cdf(x, nu).unwrap();
                assert!((back - p).abs() < 1e-10, "nu={nu} p={p} back={back}");
            }
        }
        assert!(student_t_cdf(1.0, 0.0).is_err());
        assert!(student_t_inv(0.5, -1.0).is_err());
    }

    #[test]
    fn chi2_closed_forms() {
        assert_eq!(chi2_cdf(0.0, 3.0).unwrap(), 0.0);
        assert!((chi2_cdf(2.0 * 2f64.ln(), 2.0).unwrap() - 0.5).abs() < 1e-14);
        for &x in &[0.1, 1.0, 5.0, 20.0] {
            assert!((chi2_cdf(x, 2.0).unwrap() - (1.0 - (-x / 2.0).exp())).abs() < 1e-14);
        }
        assert!(chi2_cdf(-1.0, 2.0).is_err());
        for &k in &[1.0, 4.0, 15.0, 40.0] {
            for &p in &[1e-6, 0.05, 0.5, 0.95, 1.0 - 1e-6] {
                let x = chi2_inv(p, k).unwrap();
                assert!((chi2_cdf(x, k).unwrap() - p).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn f_matches_t_squared() {
        for &nu in &[3.0, 10.0, 40.0] {
            for &t in &[0.4, 1.0, 1.812, 3.3] {
                let lhs = f_cdf(t * t, 1.0, nu).unwrap();
                let rhs = 2.0 * student_t_cdf(t, nu).unwrap() - 1.0;
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
        assert!((f_cdf(1.812f64.powi(2), 1.0, 10.0).unwrap() - 0.90).abs() < 1e-3);
        assert_eq!(f_cdf(0.0, 5.0, 20.0).unwrap(), 0.0);
        assert!(f_cdf(-0.1, 5.0, 20.0).is_err());
    }

    #[test]
    fn erfc_values() {
        assert!((erfc(0.0) - 1.0).abs() < 1e-15);
        assert!((erfc(1.0) - 0.157_299_207_050_285_13).abs() < 1e-14);
    }

    #[test]
    fn beta_symmetry() {
        for &(a, b, x) in &[(2.0, 3.0, 0.3), (0.5, 7.0, 0.9), (50.0, 0.5, 0.97)] {
            let lhs = beta_inc(a, b, x);
            let rhs = 1.0 - beta_inc(b, a, 1.0 - x);
            assert!((lhs - rhs).abs() < 1e-13);
        }
    }
}
