//! Monte Carlo checks of the prior's theoretical properties.
//!
//! The stick proportions `ν_h(x) = logistic(ψ(x)ᵀα_h)` with `α_h ~ N(μ_α, Σ_α)`
//! are iid across `h`, so the random measure `P_x(B) = Σ_h π_h(x)·1{θ_h ∈ B}`
//! has mean `P₀(B)` and a variance that depends on the weights only through
//! `μ₁ν = E ν` and `μ₂ν = E ν²`. Those moments have no closed form and are
//! estimated here by simulation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_dim, LsbpError, Result};
use crate::model::compute_weights;
use crate::rng::{purpose, RngStream};
use crate::special::{logistic, norm_cdf};

pub const MIN_MOMENT_DRAWS: usize = 1_000;
pub const MIN_MEASURES: usize = 1_000;
/// Draws used for the formula side of [`mc_random_measure_check`].
pub const REFERENCE_MOMENT_DRAWS: usize = 200_000;
/// `√(π/8)`, the logit-to-probit slope.
pub const PROBIT_SLOPE: f64 = 0.626_657_068_657_750_1;

const CHUNK: usize = 4_096;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightMoments {
    pub mu1: f64,
    pub mu2: f64,
    pub se_mu1: f64,
    pub se_mu2: f64,
    /// `E ν(x′)` when a second predictor value was given.
    pub mu1_x2: Option<f64>,
    /// `E{ν(x) ν(x′)}`.
    pub mu2_cross: Option<f64>,
    pub se_mu1_x2: Option<f64>,
    pub se_mu2_cross: Option<f64>,
    pub n_draws: usize,
}

/// Lower Cholesky factor of a covariance that may be exactly zero.
fn prior_factor(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if sigma.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(sigma.nrows(), sigma.ncols()));
    }
    Ok(crate::linalg::cholesky(sigma, "prior covariance")?.l())
}

fn check_prior(psi: &[f64], mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<()> {
    check_dim("psi length", mu.len(), psi.len())?;
    check_dim("prior covariance rows", mu.len(), sigma.nrows())?;
    check_dim("prior covariance cols", mu.len(), sigma.ncols())?;
    if psi.iter().chain(mu.iter()).any(|v| !v.is_finite()) {
        return Err(LsbpError::InvalidArgument("non-finite prior input".into()));
    }
    Ok(())
}

fn draw_alpha<R: Rng + ?Sized>(
    mu: &DVector<f64>,
    l: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let z = DVector::from_iterator(mu.len(), (0..mu.len()).map(|_| rng.sample(StandardNormal)));
    mu + l * z
}

fn dot(a: &[f64], b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[derive(Default, Clone, Copy)]
struct MomentSums {
    n: f64,
    s: [f64; 4],
    ss: [f64; 4],
}

impl MomentSums {
    fn add(&mut self, v: [f64; 4]) {
        self.n += 1.0;
        for k in 0..4 {
            self.s[k] += v[k];
            self.ss[k] += v[k] * v[k];
        }
    }

    fn merge(mut self, o: &MomentSums) -> Self {
        self.n += o.n;
        for k in 0..4 {
            self.s[k] += o.s[k];
            self.ss[k] += o.ss[k];
        }
        self
    }

    fn mean_se(&self, k: usize) -> (f64, f64) {
        let m = self.s[k] / self.n;
        let var = ((self.ss[k] - self.n * m * m) / (self.n - 1.0)).max(0.0);
        (m, (var / self.n).sqrt())
    }
}

/// Estimates `μ₁ν(x)`, `μ₂ν(x)` and, if `psi_x2` is given, `E ν(x′)` and
/// `E{ν(x)ν(x′)}` from `n_draws` prior draws of one stick coefficient.
///
/// Draws are generated in fixed-size chunks on index-addressed sub-streams, so
/// the result does not depend on the thread count.
pub fn mc_weight_moments(
    psi_x: &[f64],
    psi_x2: Option<&[f64]>,
    mu_alpha: &DVector<f64>,
    sigma_alpha: &DMatrix<f64>,
    n_draws: usize,
    rng: &RngStream,
) -> Result<WeightMoments> {
    check_prior(psi_x, mu_alpha, sigma_alpha)?;
    if let Some(p2) = psi_x2 {
        check_dim("second psi length", mu_alpha.len(), p2.len())?;
    }
    if n_draws < MIN_MOMENT_DRAWS {
        return Err(LsbpError::InvalidArgument(format!(
            "n_draws must be at least {MIN_MOMENT_DRAWS}, got {n_draws}"
        )));
    }
    let l = prior_factor(sigma_alpha)?;
    let n_chunks = n_draws.div_ceil(CHUNK);
    let chunks: Vec<MomentSums> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng.substream(&[purpose::PRIOR, c as u64]);
            let len = CHUNK.min(n_draws - c * CHUNK);
            let mut acc = MomentSums::default();
            for _ in 0..len {
                let a = draw_alpha(mu_alpha, &l, &mut r);
                let v = logistic(dot(psi_x, &a));
                let (v2, cross) = match psi_x2 {
                    Some(p2) => {
                        let w = logistic(dot(p2, &a));
                        (w, v * w)
                    }
                    None => (0.0, 0.0),
                };
                acc.add([v, v * v, v2, cross]);
            }
            acc
        })
        .collect();
    let total = chunks
        .iter()
        .fold(MomentSums::default(), |acc, c| acc.merge(c));
    let (mu1, se_mu1) = total.mean_se(0);
    let (mu2, se_mu2) = total.mean_se(1);
    let (mu1_x2, se_mu1_x2, mu2_cross, se_mu2_cross) = if psi_x2.is_some() {
        let (a, sa) = total.mean_se(2);
        let (c, sc) = total.mean_se(3);
        (Some(a), Some(sa), Some(c), Some(sc))
    } else {
        (None, None, None, None)
    };
    Ok(WeightMoments {
        mu1,
        mu2,
        se_mu1,
        se_mu2,
        mu1_x2,
        mu2_cross,
        se_mu1_x2,
        se_mu2_cross,
        n_draws,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Truncation {
    Finite(usize),
    Infinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossInput {
    /// `E ν(x′)`.
    pub mu1_x2: f64,
    /// `E{ν(x)ν(x′)}`.
    pub mu2_cross: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prop2Moments {
    pub expectation: f64,
    pub variance: f64,
    pub covariance: Option<f64>,
}

fn check_unit_open(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(LsbpError::InvalidArgument(format!("{name} must lie in (0,1), got {v}")))
    }
}

/// `μ₂{1 − q^H}/(1 − q)` with `q = 1 − s + μ₂` and `1 − q = s − μ₂`.
fn geometric_term(s: f64, m2: f64, truncation: Truncation) -> f64 {
    let denom = s - m2;
    match truncation {
        Truncation::Infinite => m2 / denom,
        Truncation::Finite(h) => m2 * (1.0 - (1.0 - denom).powi(h as i32)) / denom,
    }
}

/// Mean, variance and (optionally) cross-covariance of `P_x(B)` implied by
/// the weight moments, for `H ≥ 2` or the untruncated process.
pub fn prop2_moments(
    mu1: f64,
    mu2: f64,
    cross: Option<CrossInput>,
    truncation: Truncation,
    p0_mass: f64,
) -> Result<Prop2Moments> {
    check_unit_open("p0_mass", p0_mass)?;
    check_unit_open("mu1", mu1)?;
    if !(mu2 > 0.0 && mu2 <= mu1) {
        return Err(LsbpError::InvalidArgument(format!(
            "moment ordering 0 < mu2 <= mu1 violated: mu1 = {mu1}, mu2 = {mu2}"
        )));
    }
    if let Truncation::Finite(h) = truncation {
        if h < 2 {
            return Err(LsbpError::InvalidArgument(format!(
                "truncation level must be at least 2, got {h}"
            )));
        }
    }
    let scale = p0_mass * (1.0 - p0_mass);
    let variance = scale * geometric_term(2.0 * mu1, mu2, truncation);
    let covariance = match cross {
        None => None,
        Some(c) => {
            check_unit_open("mu1_x2", c.mu1_x2)?;
            if !(c.mu2_cross > 0.0 && c.mu2_cross <= mu1.min(c.mu1_x2)) {
                return Err(LsbpError::InvalidArgument(format!(
                    "cross moment {} must lie in (0, min(mu1, mu1_x2)]",
                    c.mu2_cross
                )));
            }
            Some(scale * geometric_term(mu1 + c.mu1_x2, c.mu2_cross, truncation))
        }
    };
    Ok(Prop2Moments {
        expectation: p0_mass,
        variance,
        covariance,
    })
}

/// Variance of `P_x(B)` under truncation at `H` with `ν_H = 1`:
/// `P₀(1−P₀)·[μ₂{1 − q^{H−1}}/(2μ₁ − μ₂) + q^{H−1}]`, `q = 1 − 2μ₁ + μ₂`.
///
/// This is `Σ_h E π_h²` summed directly; the last term is the squared
/// survivor mass.
pub fn exact_truncated_variance(mu1: f64, mu2: f64, h: usize, p0_mass: f64) -> Result<f64> {
    prop2_moments(mu1, mu2, None, Truncation::Finite(h.max(2)), p0_mass)?;
    if h < 1 {
        return Err(LsbpError::InvalidArgument("truncation level must be positive".into()));
    }
    let q = 1.0 - 2.0 * mu1 + mu2;
    let qh = q.powi(h as i32 - 1);
    Ok(p0_mass * (1.0 - p0_mass) * (mu2 * (1.0 - qh) / (2.0 * mu1 - mu2) + qh))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasureCheckReport {
    pub h: usize,
    pub p0_mass: f64,
    pub n_measures: usize,
    pub moments: WeightMoments,
    pub max_weight_sum_error: f64,
    pub weights_sum_pass: bool,
    pub mean: f64,
    pub se_mean: f64,
    pub mean_pass: bool,
    pub variance: f64,
    pub se_variance: f64,
    pub variance_formula: f64,
    pub variance_formula_infinite: f64,
    pub variance_exact_truncated: f64,
    pub variance_pass: bool,
    pub survivor_mean: f64,
    pub se_survivor: f64,
    pub survivor_formula: f64,
    pub survivor_pass: bool,
}

impl MeasureCheckReport {
    pub fn all_pass(&self) -> bool {
        self.weights_sum_pass && self.mean_pass && self.variance_pass && self.survivor_pass
    }
}

pub const SE_BAND: f64 = 3.0;
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

struct Replicate {
    value: f64,
    survivor: f64,
    sum_error: f64,
}

/// Simulates `n_measures` truncated random measures at one predictor value
/// and compares them with [`prop2_moments`] evaluated at Monte Carlo weight
/// moments ([`REFERENCE_MOMENT_DRAWS`] draws on an independent sub-stream).
pub fn mc_random_measure_check(
    psi_x: &[f64],
    mu_alpha: &DVector<f64>,
    sigma_alpha: &DMatrix<f64>,
    h: usize,
    p0_mass: f64,
    n_measures: usize,
    rng: &RngStream,
) -> Result<MeasureCheckReport> {
    let moments = mc_weight_moments(
        psi_x,
        None,
        mu_alpha,
        sigma_alpha,
        REFERENCE_MOMENT_DRAWS,
        &rng.substream(&[purpose::PRIOR, 0]),
    )?;
    random_measure_check_with(
        psi_x,
        mu_alpha,
        sigma_alpha,
        h,
        p0_mass,
        n_measures,
        moments,
        &rng.substream(&[purpose::PRIOR, 1]),
    )
}

/// As [`mc_random_measure_check`], with the formula side evaluated at
/// caller-supplied weight moments.
#[allow(clippy::too_many_arguments)]
pub fn random_measure_check_with(
    psi_x: &[f64],
    mu_alpha: &DVector<f64>,
    sigma_alpha: &DMatrix<f64>,
    h: usize,
    p0_mass: f64,
    n_measures: usize,
    moments: WeightMoments,
    rng: &RngStream,
) -> Result<MeasureCheckReport> {
    check_prior(psi_x, mu_alpha, sigma_alpha)?;
    if n_measures < MIN_MEASURES {
        return Err(LsbpError::InvalidArgument(format!(
            "n_measures must be at least {MIN_MEASURES}, got {n_measures}"
        )));
    }
    let formula = prop2_moments(moments.mu1, moments.mu2, None, Truncation::Finite(h), p0_mass)?;
    let infinite = prop2_moments(moments.mu1, moments.mu2, None, Truncation::Infinite, p0_mass)?;
    let exact = exact_truncated_variance(moments.mu1, moments.mu2, h, p0_mass)?;
    let l = prior_factor(sigma_alpha)?;

    let reps: Vec<Replicate> = (0..n_measures)
        .into_par_iter()
        .map(|m| -> Result<Replicate> {
            let mut r = rng.substream(&[purpose::PRIOR, 2, m as u64]);
            let mut alpha = DMatrix::zeros(h - 1, mu_alpha.len());
            for k in 0..h - 1 {
                alpha.set_row(k, &draw_alpha(mu_alpha, &l, &mut r).transpose());
            }
            let w = compute_weights(psi_x, &alpha)?;
            let total: f64 = w.pi.iter().sum();
            let value = w
                .pi
                .iter()
                .filter(|_| r.random::<f64>() < p0_mass)
                .sum();
            let head: f64 = w.pi[..h - 1].iter().sum();
            Ok(Replicate {
                value,
                survivor: 1.0 - head,
                sum_error: (total - 1.0).abs(),
            })
        })
        .collect::<Result<_>>()?;

    let n = n_measures as f64;
    let mean = reps.iter().map(|r| r.value).sum::<f64>() / n;
    let m2 = reps.iter().map(|r| (r.value - mean).powi(2)).sum::<f64>() / n;
    let m4 = reps.iter().map(|r| (r.value - mean).powi(4)).sum::<f64>() / n;
    let variance = m2 * n / (n - 1.0);
    let se_mean = (variance / n).sqrt();
    let se_variance = ((m4 - m2 * m2).max(0.0) / n).sqrt();

    let survivor_mean = reps.iter().map(|r| r.survivor).sum::<f64>() / n;
    let survivor_var = reps
        .iter()
        .map(|r| (r.survivor - survivor_mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    let se_survivor = (survivor_var / n).sqrt();
    let survivor_formula = (1.0 - moments.mu1).powi(h as i32 - 1);
    let max_weight_sum_error = reps.iter().map(|r| r.sum_error).fold(0.0, f64::max);

    Ok(MeasureCheckReport {
        h,
        p0_mass,
        n_measures,
        moments,
        max_weight_sum_error,
        weights_sum_pass: max_weight_sum_error <= WEIGHT_SUM_TOL,
        mean,
        se_mean,
        mean_pass: (mean - p0_mass).abs() <= SE_BAND * se_mean,
        variance,
        se_variance,
        variance_formula: formula.variance,
        variance_formula_infinite: infinite.variance,
        variance_exact_truncated: exact,
        variance_pass: (variance - formula.variance).abs() <= SE_BAND * se_variance,
        survivor_mean,
        se_survivor,
        survivor_formula,
        survivor_pass: (survivor_mean - survivor_formula).abs() <= SE_BAND * se_survivor,
    })
}

/// Prior on `ᾱ = √(π/8)·α`: `(√(π/8)·μ_α, (π/8)·Σ_α)`.
pub fn probit_rescale(
    mu_alpha: &DVector<f64>,
    sigma_alpha: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    (
        mu_alpha * PROBIT_SLOPE,
        sigma_alpha * (PROBIT_SLOPE * PROBIT_SLOPE),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbitGap {
    pub t_at_max: f64,
    pub max_gap: f64,
    pub grid_points: usize,
}

/// `sup_t |logistic(t) − Φ(√(π/8)·t)|` over an evenly spaced grid on `[lo, hi]`.
pub fn max_probit_gap(lo: f64, hi: f64, grid_points: usize) -> Result<ProbitGap> {
    if !(lo < hi) || grid_points < 2 {
        return Err(LsbpError::InvalidArgument(
            "probit gap grid needs lo < hi and at least 2 points".into(),
        ));
    }
    let step = (hi - lo) / (grid_points - 1) as f64;
    let mut best = ProbitGap {
        t_at_max: lo,
        max_gap: 0.0,
        grid_points,
    };
    for i in 0..grid_points {
        let t = lo + step * i as f64;
        let gap = (logistic(t) - norm_cdf(PROBIT_SLOPE * t)).abs();
        if gap > best.max_gap {
            best.max_gap = gap;
            best.t_at_max = t;
        }
    }
    Ok(best)
}
