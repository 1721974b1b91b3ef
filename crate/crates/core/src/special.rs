//! Scalar special functions used throughout the model code.

use libm::erfc;

pub use statrs::function::gamma::{digamma, ln_gamma};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln logistic(x)`.
pub fn log_logistic(x: f64) -> f64 {
    -softplus(-x)
}

pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z - 0.5 * LN_2PI).exp()
}

/// Log density of `N(mean, var)` at `y`.
pub fn log_normal_density(y: f64, mean: f64, var: f64) -> f64 {
    let r = y - mean;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

/// Standard normal CDF, accurate in both tails.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

/// `ln Φ(z)`, using an asymptotic expansion deep in the lower tail.
pub fn log_norm_cdf(z: f64) -> f64 {
    if z > -20.0 {
        norm_cdf(z).ln()
    } else {
        let z2 = z * z;
        let mut term = 1.0;
        let mut series = 1.0;
        for k in 1..8 {
            term *= -((2 * k - 1) as f64) / z2;
            series += term;
        }
        -0.5 * z2 - (-z).ln() - 0.5 * LN_2PI + series.ln()
    }
}

/// `ln Σ exp(v_i)`; returns `-inf` for an empty slice or all `-inf` input.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln cosh(x)` without overflow.
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Binary entropy in nats.
pub fn bernoulli_entropy(p: f64) -> f64 {
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.ln();
    }
    if p < 1.0 {
        h -= (1.0 - p) * (-p).ln_1p();
    }
    h
}

/// `ln Γ(a + d) − ln Γ(a)`, accurate when `a` is large and `d` is moderate.
pub fn ln_gamma_diff(a: f64, d: f64) -> f64 {
    if a < 50.0 || a + d < 50.0 {
        return ln_gamma(a + d) - ln_gamma(a);
    }
    // Stirling series; the leading terms are rearranged so nothing large cancels
    let b = a + d;
    let tail = |x: f64| {
        let x2 = x * x;
        (1.0 / 12.0 - (1.0 / 360.0 - (1.0 / 1260.0 - 1.0 / (1680.0 * x2)) / x2) / x2) / x
    };
    (a - 0.5) * (d / a).ln_1p() + d * b.ln() - d + tail(b) - tail(a)
}

/// `KL(Ga(a1, b1) ‖ Ga(a0, b0))`, shape/rate parameterization.
pub fn kl_gamma(a1: f64, b1: f64, a0: f64, b0: f64) -> f64 {
    let e = b1 - b0;
    (a1 - a0) * digamma(a1) - ln_gamma_diff(a0, a1 - a0) + a0 * (e / b0).ln_1p() - a1 * e / b1
}
