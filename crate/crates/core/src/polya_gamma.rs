//! Exact sampling and moments for the Pólya-Gamma distribution `PG(1, c)`.
//!
//! The sampler is the alternating-series accept/reject scheme: a proposal
//! from a mixture of a truncated exponential (right of `t = 0.64`) and a
//! truncated inverse Gaussian (left of `t`), accepted by bracketing the
//! target density between successive partial sums of its series expansion.
//! The expected number of proposals is below 1.0009 for every `c`.

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use std::f64::consts::PI;

use crate::special::log_norm_cdf;

const TRUNC: f64 = 0.64;
const TRUNC_RECIP: f64 = 1.0 / TRUNC;

/// `E[ω]` for `ω ~ PG(1, c)`: `tanh(c/2) / (2c)`, with limit `1/4` at zero.
pub fn pg_mean(c: f64) -> f64 {
    let a = c.abs();
    if a < 1e-4 {
        // tanh(x)/x series around 0
        0.25 - a * a / 48.0
    } else {
        0.5 * (0.5 * a).tanh() / a
    }
}

/// One draw from `PG(1, c)`.
pub fn sample_pg1<R: Rng + ?Sized>(c: f64, rng: &mut R) -> f64 {
    let z = 0.5 * c.abs();
    let fz = 0.125 * PI * PI + 0.5 * z * z;
    let p_exp = mass_texpon(z, fz);
    loop {
        let x = if rng.random::<f64>() < p_exp {
            let e: f64 = rng.sample(Exp1);
            TRUNC + e / fz
        } else {
            rtigauss(z, rng)
        };
        let mut s = coef(0, x);
        let y = rng.random::<f64>() * s;
        let mut n = 0usize;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= coef(n, x);
                if y <= s {
                    return 0.25 * x;
                }
            } else {
                s += coef(n, x);
                if y > s {
                    break;
                }
            }
        }
    }
}

/// n-th term of the piecewise series for the Jacobi density.
fn coef(n: usize, x: f64) -> f64 {
    let k = (n as f64 + 0.5) * PI;
    if x > TRUNC {
        k * (-0.5 * k * k * x).exp()
    } else if x > 0.0 {
        let nh = n as f64 + 0.5;
        (-1.5 * ((0.5 * PI).ln() + x.ln()) + k.ln() - 2.0 * nh * nh / x).exp()
    } else {
        0.0
    }
}

/// Probability of proposing from the exponential tail piece.
fn mass_texpon(z: f64, fz: f64) -> f64 {
    let t = TRUNC;
    let b = (1.0 / t).sqrt() * (t * z - 1.0);
    let a = -(1.0 / t).sqrt() * (t * z + 1.0);
    let x0 = fz.ln() + fz * t;
    let xb = x0 - z + log_norm_cdf(b);
    let xa = x0 + z + log_norm_cdf(a);
    let q_over_p = 4.0 / PI * (xb.exp() + xa.exp());
    1.0 / (1.0 + q_over_p)
}

/// Inverse-Gaussian `IG(1/z, 1)` truncated to `(0, TRUNC)`.
fn rtigauss<R: Rng + ?Sized>(z: f64, rng: &mut R) -> f64 {
    let t = TRUNC;
    let mut x = t + 1.0;
    if TRUNC_RECIP > z {
        // mean beyond the truncation point: chi-square proposal with rejection
        let mut alpha = 0.0;
        while rng.random::<f64>() > alpha {
            let mut e1: f64 = rng.sample(Exp1);
            let mut e2: f64 = rng.sample(Exp1);
            while e1 * e1 > 2.0 * e2 / t {
                e1 = rng.sample(Exp1);
                e2 = rng.sample(Exp1);
            }
            let d = 1.0 + e1 * t;
            x = t / (d * d);
            alpha = (-0.5 * z * z * x).exp();
        }
    } else {
        let mu = 1.0 / z;
        while x > t {
            let yn: f64 = rng.sample(StandardNormal);
            let half_mu = 0.5 * mu;
            let mu_y = mu * yn * yn;
            x = mu + half_mu * mu_y - half_mu * (4.0 * mu_y + mu_y * mu_y).sqrt();
            if rng.random::<f64>() > mu / (mu + x) {
                x = mu * mu / x;
            }
        }
    }
    x
}
