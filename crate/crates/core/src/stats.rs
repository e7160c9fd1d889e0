//! Chi-squared distribution for the workspace dimensions used here (2 and 3
//! degrees of freedom).
//!
//! The squared Mahalanobis norm of a Gaussian offset is χ²-distributed, which
//! is what ties an ellipsoid's squared radius `c` to the probability mass it
//! encloses. Both tails are exposed: the risk code works with the upper tail
//! (`sf`/`isf`) so that small risks keep their relative precision.

use crate::error::{Error, Result};

/// Largest probability accepted by [`chi2_inv_cdf`] before clamping.
pub const MAX_CDF_PROBABILITY: f64 = 1.0 - 1e-15;

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_MAX_ITER: usize = 500;

/// Degrees of freedom of a chi-squared distribution, restricted to 2 or 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dof(u8);

impl Dof {
    pub const TWO: Dof = Dof(2);
    pub const THREE: Dof = Dof(3);

    pub fn new(n: usize) -> Result<Self> {
        match n {
            2 => Ok(Dof::TWO),
            3 => Ok(Dof::THREE),
            _ => Err(Error::domain(format!(
                "chi-squared degrees of freedom must be 2 or 3, got {n}"
            ))),
        }
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }

    fn half(self) -> f64 {
        self.0 as f64 / 2.0
    }

    /// ln Γ(n/2) for the supported dof values.
    fn ln_gamma_half(self) -> f64 {
        match self.0 {
            2 => 0.0,
            // ln(√π / 2)
            _ => 0.5 * std::f64::consts::PI.ln() - std::f64::consts::LN_2,
        }
    }
}

fn check_x(x: f64) -> Result<()> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::domain(format!(
            "chi-squared argument must be nonnegative, got {x}"
        )));
    }
    Ok(())
}

/// Density of χ²ₙ at `x`.
pub fn chi2_pdf(x: f64, n: Dof) -> Result<f64> {
    check_x(x)?;
    Ok(pdf_unchecked(x, n))
}

pub(crate) fn pdf_unchecked(x: f64, n: Dof) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    match n.0 {
        2 => 0.5 * (-0.5 * x).exp(),
        _ => (x.sqrt() * (-0.5 * x).exp()) / (2.0 * std::f64::consts::PI).sqrt(),
    }
}

/// P(X ≤ x) for X ~ χ²ₙ.
pub fn chi2_cdf(x: f64, n: Dof) -> Result<f64> {
    check_x(x)?;
    Ok(cdf_unchecked(x, n))
}

/// P(X > x) for X ~ χ²ₙ, computed without cancellation in the upper tail.
pub fn chi2_sf(x: f64, n: Dof) -> Result<f64> {
    check_x(x)?;
    Ok(sf_unchecked(x, n))
}

pub(crate) fn cdf_unchecked(x: f64, n: Dof) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    match n.0 {
        2 => -(-0.5 * x).exp_m1(),
        _ => {
            let (p, q) = regularized_gamma(n.half(), 0.5 * x, n.ln_gamma_half());
            if p <= 0.5 {
                p
            } else {
                1.0 - q
            }
        }
    }
}

pub(crate) fn sf_unchecked(x: f64, n: Dof) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    match n.0 {
        2 => (-0.5 * x).exp(),
        _ => {
            let (p, q) = regularized_gamma(n.half(), 0.5 * x, n.ln_gamma_half());
            if q <= 0.5 {
                q
            } else {
                1.0 - p
            }
        }
    }
}

/// Returns (P(a, x), Q(a, x)); exactly one of them is computed directly and
/// the other is its complement, so callers pick the smaller one.
fn regularized_gamma(a: f64, x: f64, ln_gamma_a: f64) -> (f64, f64) {
    let ln_prefactor = a * x.ln() - x - ln_gamma_a;
    if x < a + 1.0 {
        // Series: P = e^{-x} x^a / Γ(a) · Σ xⁿ / (a (a+1) … (a+n))
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..GAMMA_MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * GAMMA_EPS {
                break;
            }
        }
        let p = (ln_prefactor.exp() * sum).clamp(0.0, 1.0);
        (p, 1.0 - p)
    } else {
        // Modified Lentz continued fraction for Q.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..GAMMA_MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < GAMMA_EPS {
                break;
            }
        }
        let q = (ln_prefactor.exp() * h).clamp(0.0, 1.0);
        (1.0 - q, q)
    }
}

/// Inverse CDF: the `x` with P(X ≤ x) = p.
///
/// `p` is clamped to [`MAX_CDF_PROBABILITY`] so the returned radius stays
/// finite; `p ≥ 1` is rejected.
pub fn chi2_inv_cdf(p: f64, n: Dof) -> Result<f64> {
    if p.is_nan() || !(0.0..1.0).contains(&p) {
        return Err(Error::domain(format!(
            "inverse chi-squared CDF needs p in [0, 1), got {p}"
        )));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    let p = p.min(MAX_CDF_PROBABILITY);
    if p > 0.5 {
        return Ok(isf_unchecked(1.0 - p, n));
    }
    Ok(match n.0 {
        2 => -2.0 * (-p).ln_1p(),
        _ => invert(n, p, false),
    })
}

/// Inverse survival function: the `x` with P(X > x) = q, for q in (0, 1].
pub fn chi2_isf(q: f64, n: Dof) -> Result<f64> {
    if q.is_nan() || q <= 0.0 || q > 1.0 {
        return Err(Error::domain(format!(
            "inverse chi-squared survival function needs q in (0, 1], got {q}"
        )));
    }
    Ok(isf_unchecked(q, n))
}

pub(crate) fn isf_unchecked(q: f64, n: Dof) -> f64 {
    if q >= 1.0 {
        return 0.0;
    }
    if q > 0.5 {
        return match n.0 {
            2 => -2.0 * (-(1.0 - q)).ln_1p(),
            _ => invert(n, 1.0 - q, false),
        };
    }
    match n.0 {
        2 => -2.0 * q.ln(),
        _ => invert(n, q, true),
    }
}

/// Bracketed Newton iteration. With `upper` the target is sf(x) = target,
/// otherwise cdf(x) = target. Either way the residual is monotone in x.
fn invert(n: Dof, target: f64, upper: bool) -> f64 {
    // residual(x) is increasing in x
    let residual = |x: f64| {
        if upper {
            target - sf_unchecked(x, n)
        } else {
            cdf_unchecked(x, n) - target
        }
    };

    let mut lo = 0.0;
    let mut hi = n.get() as f64;
    while residual(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }

    // Wilson–Hilferty start, clipped into the bracket.
    let k = n.get() as f64;
    let z = approx_normal_quantile(if upper { 1.0 - target } else { target });
    let wh = k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3);
    let mut x = if wh > lo && wh < hi { wh } else { 0.5 * (lo + hi) };

    for _ in 0..200 {
        let r = residual(x);
        if r == 0.0 {
            return x;
        }
        if r < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let slope = pdf_unchecked(x, n);
        let mut next = if slope > 0.0 { x - r / slope } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * x.max(1e-300) || hi - lo <= 1e-15 * hi {
            return next;
        }
        x = next;
    }
    x
}

/// Rough normal quantile used only to seed Newton.
fn approx_normal_quantile(p: f64) -> f64 {
    let p = p.clamp(1e-300, 1.0 - 1e-16);
    // Tukey lambda approximation; plenty for a starting point.
    (p.powf(0.14) - (1.0 - p).powf(0.14)) / 0.1975
}
