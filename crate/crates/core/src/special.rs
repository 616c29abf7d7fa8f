//! Log-gamma, the regularized incomplete beta function and its inverse.

use thiserror::Error;

/// Iteration cap for the continued fraction and for root-finding.
pub const MAX_ITER: usize = 200;

/// Tolerance on `|I_x(a, b) - q|` accepted by [`beta_inv_quantile`].
pub const QUANTILE_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecialError {
    #[error("no convergence after {0} iterations")]
    NonConvergence(usize),
    #[error("argument out of domain: {0}")]
    Domain(&'static str),
}

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

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(x: f64, a: f64, b: f64) -> Result<f64, SpecialError> {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            return Ok(h);
        }
    }
    Err(SpecialError::NonConvergence(MAX_ITER))
}

/// Regularized incomplete beta `I_x(a, b)` for `a, b > 0`, `x ∈ [0, 1]`.
pub fn reg_inc_beta(x: f64, a: f64, b: f64) -> Result<f64, SpecialError> {
    if !(a > 0.0 && b > 0.0) {
        return Err(SpecialError::Domain("beta parameters must be positive"));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(SpecialError::Domain("x must lie in [0, 1]"));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(ln_front.exp() * beta_cf(x, a, b)? / a)
    } else {
        Ok(1.0 - ln_front.exp() * beta_cf(1.0 - x, b, a)? / b)
    }
}

/// Quantile `x` of Beta(a, b): `I_x(a, b) = q`.
///
/// Newton steps on the bracket `[lo, hi]`, falling back to bisection whenever
/// a step leaves the bracket. Runs until the bracket collapses to adjacent
/// floats or the residual is below `1e-15`; gives up with `NonConvergence`
/// after [`MAX_ITER`] steps unless the residual is already within
/// [`QUANTILE_TOL`].
pub fn beta_inv_quantile(q: f64, a: f64, b: f64) -> Result<f64, SpecialError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(SpecialError::Domain("q must lie in (0, 1)"));
    }
    if !(a > 0.0 && b > 0.0) {
        return Err(SpecialError::Domain("beta parameters must be positive"));
    }
    let ln_b = ln_beta(a, b);
    let density = |x: f64| ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_b).exp();

    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut x = a / (a + b);
    let mut resid = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let f = reg_inc_beta(x, a, b)? - q;
        resid = f.abs();
        if resid <= 1e-15 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= f64::EPSILON * hi.max(f64::MIN_POSITIVE) {
            return Ok(x);
        }
        let pdf = density(x);
        let newton = x - f / pdf;
        x = if pdf.is_finite() && pdf > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    if resid <= QUANTILE_TOL {
        Ok(x)
    } else {
        Err(SpecialError::NonConvergence(MAX_ITER))
    }
}
