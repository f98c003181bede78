//! Chi-square distribution function and its inverse.

use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

const MAX_ITER: usize = 300;

fn check_dof(dof: usize) -> Result<()> {
    if dof == 0 {
        return Err(Error::InvalidArgument("chi-square needs dof >= 1".into()));
    }
    Ok(())
}

/// `P(χ²_dof <= x)`.
pub fn chi_square_cdf(dof: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    gamma_lr(dof as f64 / 2.0, x / 2.0)
}

/// `P(χ²_dof > x)`, accurate in the upper tail.
pub fn chi_square_sf(dof: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(dof as f64 / 2.0, x / 2.0)
}

pub fn chi_square_pdf(dof: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return if dof == 2 { 0.5 } else { 0.0 };
    }
    let k = dof as f64 / 2.0;
    ((k - 1.0) * x.ln() - x / 2.0 - k * std::f64::consts::LN_2 - ln_gamma(k)).exp()
}

/// Returns `x` with `P(χ²_dof <= x) = p`.
///
/// Safeguarded Newton on the CDF (or on the survival function when
/// `p > 0.5`), falling back to bisection whenever a step leaves the bracket.
pub fn chi_square_inverse_cdf(dof: usize, p: f64) -> Result<f64> {
    check_dof(dof)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "chi-square quantile needs p in (0, 1), got {p}"
        )));
    }
    let upper_tail = p > 0.5;
    let target = if upper_tail { 1.0 - p } else { p };
    // g is increasing in x in both branches.
    let g = |x: f64| {
        if upper_tail {
            target - chi_square_sf(dof, x)
        } else {
            chi_square_cdf(dof, x) - target
        }
    };

    let mut lo = 0.0_f64;
    let mut hi = (dof as f64).max(1.0);
    while g(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::InvalidArgument("chi-square quantile bracket overflow".into()));
        }
    }

    let mut x = initial_guess(dof, p).clamp(lo, hi);
    if !(x > lo && x < hi) {
        x = 0.5 * (lo + hi);
    }
    for _ in 0..MAX_ITER {
        let gx = g(x);
        if gx == 0.0 {
            return Ok(x);
        }
        if gx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if gx.abs() <= 1e-15 * target.max(1e-300) || (hi - lo) <= 1e-15 * hi.max(1e-300) {
            break;
        }
        let slope = chi_square_pdf(dof, x);
        let newton = if slope > 0.0 && slope.is_finite() {
            x - gx / slope
        } else {
            f64::NAN
        };
        x = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Ok(x)
}

// Wilson-Hilferty cube approximation; only a starting point.
fn initial_guess(dof: usize, p: f64) -> f64 {
    let k = dof as f64;
    let z = normal_quantile_approx(p);
    let h = 2.0 / (9.0 * k);
    (k * (1.0 - h + z * h.sqrt()).powi(3)).max(1e-8)
}

// Acklam-style rational approximation, good to ~1e-9; refined by the caller.
fn normal_quantile_approx(p: f64) -> f64 {
    let t = if p < 0.5 { p } else { 1.0 - p };
    let u = (-2.0 * t.ln()).sqrt();
    let z = u
        - (2.515517 + 0.802853 * u + 0.010328 * u * u) / (1.0 + 1.432788 * u + 0.189269 * u * u + 0.001308 * u * u * u);
    if p < 0.5 {
        -z
    } else {
        z
    }
}
