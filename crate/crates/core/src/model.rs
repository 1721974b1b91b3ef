//! Model types and the deterministic mathematics shared by every engine:
//! logit stick-breaking weights, the Gaussian-kernel conditional density and
//! CDF, the observed-data log-likelihood, and the truncation error bound.
//!
//! Components are indexed from zero in code. Component `h` has stick
//! proportion `ν_h = logistic(ψᵀα_h)` for `h < H - 1`, and the last
//! component takes the survivor mass (`ν_{H-1} = 1`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::DesignMap;
use crate::error::{check_dim, LsbpError, Result};
use crate::linalg::{cholesky, is_spd, log_det};
use crate::special::{log_logistic, log_normal_density, log_sum_exp, logistic, norm_cdf};

/// Truncation level and prior hyperparameters.
///
/// `β_h ~ N_P(mu_beta, sigma_beta)`, `σ_h⁻² ~ Ga(a_sigma, b_sigma)` (rate
/// parameterization) and `α_h ~ N_R(mu_alpha, sigma_alpha)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelConfigRecord", into = "ModelConfigRecord")]
pub struct ModelConfig {
    pub h: usize,
    pub mu_beta: DVector<f64>,
    pub sigma_beta: DMatrix<f64>,
    pub mu_alpha: DVector<f64>,
    pub sigma_alpha: DMatrix<f64>,
    pub a_sigma: f64,
    pub b_sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfigRecord {
    pub h: usize,
    pub mu_beta: Vec<f64>,
    pub sigma_beta: Vec<Vec<f64>>,
    pub mu_alpha: Vec<f64>,
    pub sigma_alpha: Vec<Vec<f64>>,
    pub a_sigma: f64,
    pub b_sigma: f64,
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(LsbpError::InvalidArgument(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl TryFrom<ModelConfigRecord> for ModelConfig {
    type Error = LsbpError;

    fn try_from(r: ModelConfigRecord) -> Result<Self> {
        ModelConfig::new(
            r.h,
            DVector::from_vec(r.mu_beta),
            matrix_from_rows(&r.sigma_beta, "sigma_beta")?,
            DVector::from_vec(r.mu_alpha),
            matrix_from_rows(&r.sigma_alpha, "sigma_alpha")?,
            r.a_sigma,
            r.b_sigma,
        )
    }
}

impl From<ModelConfig> for ModelConfigRecord {
    fn from(c: ModelConfig) -> Self {
        ModelConfigRecord {
            h: c.h,
            mu_beta: c.mu_beta.iter().copied().collect(),
            sigma_beta: matrix_to_rows(&c.sigma_beta),
            mu_alpha: c.mu_alpha.iter().copied().collect(),
            sigma_alpha: matrix_to_rows(&c.sigma_alpha),
            a_sigma: c.a_sigma,
            b_sigma: c.b_sigma,
        }
    }
}

/// Prior precisions and log-determinants, computed once per run.
#[derive(Debug, Clone)]
pub struct PriorPrecisions {
    pub alpha_prec: DMatrix<f64>,
    /// `Σ_α⁻¹ μ_α`
    pub alpha_shift: DVector<f64>,
    pub alpha_logdet_cov: f64,
    pub beta_prec: DMatrix<f64>,
    pub beta_shift: DVector<f64>,
    pub beta_logdet_cov: f64,
}

impl ModelConfig {
    pub fn new(
        h: usize,
        mu_beta: DVector<f64>,
        sigma_beta: DMatrix<f64>,
        mu_alpha: DVector<f64>,
        sigma_alpha: DMatrix<f64>,
        a_sigma: f64,
        b_sigma: f64,
    ) -> Result<Self> {
        let c = ModelConfig {
            h,
            mu_beta,
            sigma_beta,
            mu_alpha,
            sigma_alpha,
            a_sigma,
            b_sigma,
        };
        c.validate()?;
        Ok(c)
    }

    /// Zero prior means, identity covariances and the given Gamma prior.
    pub fn standard(h: usize, p: usize, r: usize, a_sigma: f64, b_sigma: f64) -> Result<Self> {
        ModelConfig::new(
            h,
            DVector::zeros(p),
            DMatrix::identity(p, p),
            DVector::zeros(r),
            DMatrix::identity(r, r),
            a_sigma,
            b_sigma,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.h < 1 {
            return Err(LsbpError::InvalidArgument("H must be ≥ 1".into()));
        }
        check_dim("sigma_beta rows", self.p(), self.sigma_beta.nrows())?;
        check_dim("sigma_alpha rows", self.r(), self.sigma_alpha.nrows())?;
        if !is_spd(&self.sigma_beta) {
            return Err(LsbpError::InvalidArgument(
                "sigma_beta must be symmetric positive definite".into(),
            ));
        }
        if !is_spd(&self.sigma_alpha) {
            return Err(LsbpError::InvalidArgument(
                "sigma_alpha must be symmetric positive definite".into(),
            ));
        }
        if !(self.a_sigma > 0.0 && self.b_sigma > 0.0)
            || !self.a_sigma.is_finite()
            || !self.b_sigma.is_finite()
        {
            return Err(LsbpError::InvalidArgument(
                "a_sigma and b_sigma must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.mu_beta.len()
    }

    pub fn r(&self) -> usize {
        self.mu_alpha.len()
    }

    pub fn precisions(&self) -> Result<PriorPrecisions> {
        let ca = cholesky(&self.sigma_alpha, "sigma_alpha")?;
        let cb = cholesky(&self.sigma_beta, "sigma_beta")?;
        let alpha_prec = ca.inverse();
        let beta_prec = cb.inverse();
        Ok(PriorPrecisions {
            alpha_shift: &alpha_prec * &self.mu_alpha,
            alpha_logdet_cov: log_det(&ca),
            alpha_prec,
            beta_shift: &beta_prec * &self.mu_beta,
            beta_logdet_cov: log_det(&cb),
            beta_prec,
        })
    }
}

/// Raw predictor/response columns a dataset was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawColumns {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Response on the model scale plus the kernel (`Λ`) and log-odds (`Ψ`) designs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: DVector<f64>,
    pub lambda: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    /// Map from raw predictor/response to model scale, when built from raw data.
    pub transform: Option<DesignMap>,
    pub raw: Option<RawColumns>,
}

impl Dataset {
    /// Zero rows are accepted here; the engines' `run_*` entry points require `n ≥ 1`.
    pub fn new(y: DVector<f64>, lambda: DMatrix<f64>, psi: DMatrix<f64>) -> Result<Self> {
        check_dim("Lambda rows", y.len(), lambda.nrows())?;
        check_dim("Psi rows", y.len(), psi.nrows())?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(LsbpError::InvalidArgument("non-finite response".into()));
        }
        Ok(Dataset {
            y,
            lambda,
            psi,
            transform: None,
            raw: None,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.lambda.ncols()
    }

    pub fn r(&self) -> usize {
        self.psi.ncols()
    }

    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        check_dim("kernel design columns", config.p(), self.p())?;
        check_dim("logit design columns", config.r(), self.r())
    }

    pub fn require_nonempty(&self) -> Result<()> {
        if self.n() == 0 {
            Err(LsbpError::InvalidArgument("dataset has no units".into()))
        } else {
            Ok(())
        }
    }

    /// `Λ βᵀ`: kernel means, `n × H`.
    pub fn kernel_means(&self, params: &MixtureParams) -> DMatrix<f64> {
        &self.lambda * params.beta.transpose()
    }

    /// `Ψ αᵀ`: stick log-odds, `n × (H − 1)`.
    pub fn logits(&self, params: &MixtureParams) -> DMatrix<f64> {
        &self.psi * params.alpha.transpose()
    }
}

/// One parameter point: `alpha` is `(H−1) × R`, `beta` is `H × P`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureParamsRecord", into = "MixtureParamsRecord")]
pub struct MixtureParams {
    pub alpha: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub sigma2: DVector<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureParamsRecord {
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    /// Column count of `alpha`, needed when `H = 1` leaves it without rows.
    pub r: usize,
}

impl TryFrom<MixtureParamsRecord> for MixtureParams {
    type Error = LsbpError;
    fn try_from(r: MixtureParamsRecord) -> Result<Self> {
        let alpha = if r.alpha.is_empty() {
            DMatrix::zeros(0, r.r)
        } else {
            matrix_from_rows(&r.alpha, "alpha")?
        };
        let p = MixtureParams {
            alpha,
            beta: matrix_from_rows(&r.beta, "beta")?,
            sigma2: DVector::from_vec(r.sigma2),
        };
        p.validate_shape()?;
        Ok(p)
    }
}

impl From<MixtureParams> for MixtureParamsRecord {
    fn from(p: MixtureParams) -> Self {
        MixtureParamsRecord {
            r: p.alpha.ncols(),
            alpha: matrix_to_rows(&p.alpha),
            beta: matrix_to_rows(&p.beta),
            sigma2: p.sigma2.iter().copied().collect(),
        }
    }
}

impl MixtureParams {
    pub fn h(&self) -> usize {
        self.sigma2.len()
    }

    fn validate_shape(&self) -> Result<()> {
        let h = self.sigma2.len();
        if h == 0 {
            return Err(LsbpError::InvalidArgument("no components".into()));
        }
        check_dim("beta rows", h, self.beta.nrows())?;
        check_dim("alpha rows", h - 1, self.alpha.nrows())?;
        if self.sigma2.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(LsbpError::InvalidArgument(
                "sigma2 entries must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        check_dim("components", config.h, self.sigma2.len())?;
        check_dim("beta columns", config.p(), self.beta.ncols())?;
        check_dim("alpha columns", config.r(), self.alpha.ncols())?;
        self.validate_shape()
    }

    /// A point at the prior means with unit variances.
    pub fn at_prior_mean(config: &ModelConfig) -> Self {
        let h = config.h;
        MixtureParams {
            alpha: DMatrix::from_fn(h - 1, config.r(), |_, j| config.mu_alpha[j]),
            beta: DMatrix::from_fn(h, config.p(), |_, j| config.mu_beta[j]),
            sigma2: DVector::from_element(h, 1.0),
        }
    }
}

/// Stick proportions (`H − 1`, the last one is implicitly 1) and weights (`H`).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightProfile {
    pub nu: Vec<f64>,
    pub pi: Vec<f64>,
}

/// Writes `ln π_h` for the given stick log-odds into `out` (`len = logits.len() + 1`).
pub fn log_weights_from_logits(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), logits.len() + 1);
    let mut log_survivor = 0.0;
    for (h, &eta) in logits.iter().enumerate() {
        out[h] = log_survivor + log_logistic(eta);
        log_survivor += log_logistic(-eta);
    }
    out[logits.len()] = log_survivor;
}

/// Stick-breaking weights from stick log-odds (`π_h = ν_h ∏_{l<h} (1 − ν_l)`).
pub fn weights_from_logits(logits: &[f64]) -> WeightProfile {
    let mut nu = Vec::with_capacity(logits.len());
    let mut pi = Vec::with_capacity(logits.len() + 1);
    let mut survivor = 1.0;
    for &eta in logits {
        let v = logistic(eta);
        nu.push(v);
        pi.push(v * survivor);
        survivor *= logistic(-eta);
    }
    pi.push(survivor);
    WeightProfile { nu, pi }
}

fn row_dot(m: &DMatrix<f64>, row: usize, v: &[f64]) -> f64 {
    v.iter().enumerate().map(|(j, x)| m[(row, j)] * x).sum()
}

fn logits_for(psi_row: &[f64], alpha: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_dim("psi length", alpha.ncols(), psi_row.len())?;
    Ok((0..alpha.nrows()).map(|h| row_dot(alpha, h, psi_row)).collect())
}

pub fn compute_weights(psi_row: &[f64], alpha: &DMatrix<f64>) -> Result<WeightProfile> {
    Ok(weights_from_logits(&logits_for(psi_row, alpha)?))
}

/// Inverse of the stick-breaking map: `ν_h = π_h / Σ_{l≥h} π_l`, with `ν_H = 1`.
pub fn continuation_ratio(pi: &[f64]) -> Result<Vec<f64>> {
    if pi.is_empty() {
        return Err(LsbpError::InvalidArgument("empty weight vector".into()));
    }
    if pi.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(LsbpError::InvalidArgument("weights must be nonnegative".into()));
    }
    let total: f64 = pi.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(LsbpError::InvalidArgument(format!(
            "weights sum to {total}, not 1"
        )));
    }
    let h = pi.len();
    let mut nu = vec![1.0; h];
    // survivor sums accumulated from the tail are exact for trailing zeros
    let mut survivor = 0.0;
    let mut tails = vec![0.0; h];
    for k in (0..h).rev() {
        survivor += pi[k];
        tails[k] = survivor;
    }
    for k in 0..h - 1 {
        if tails[k] <= f64::EPSILON {
            return Err(LsbpError::DegenerateSimplex {
                component: k,
                survivor: tails[k],
            });
        }
        nu[k] = (pi[k] / tails[k]).min(1.0);
    }
    Ok(nu)
}

fn check_params(lambda_row: &[f64], psi_row: &[f64], params: &MixtureParams) -> Result<()> {
    check_dim("lambda length", params.beta.ncols(), lambda_row.len())?;
    check_dim("psi length", params.alpha.ncols(), psi_row.len())
}

/// Per-component `ln π_h + ln N(y; λᵀβ_h, σ_h²)` for one unit.
pub fn component_log_terms(
    y: f64,
    logits: &[f64],
    means: &[f64],
    sigma2: &[f64],
    out: &mut [f64],
) {
    log_weights_from_logits(logits, out);
    for h in 0..out.len() {
        out[h] += log_normal_density(y, means[h], sigma2[h]);
    }
}

/// Normalized membership probabilities for one unit, in place; returns the
/// log normalizer `ln f_x(y)`.
pub fn allocation_probabilities(
    y: f64,
    logits: &[f64],
    means: &[f64],
    sigma2: &[f64],
    out: &mut [f64],
) -> f64 {
    component_log_terms(y, logits, means, sigma2, out);
    let lse = log_sum_exp(out);
    for v in out.iter_mut() {
        *v = (*v - lse).exp();
    }
    lse
}

fn unit_means(lambda_row: &[f64], params: &MixtureParams) -> Vec<f64> {
    (0..params.h()).map(|h| row_dot(&params.beta, h, lambda_row)).collect()
}

pub fn log_conditional_density(
    y: f64,
    lambda_row: &[f64],
    psi_row: &[f64],
    params: &MixtureParams,
) -> Result<f64> {
    check_params(lambda_row, psi_row, params)?;
    let logits = logits_for(psi_row, &params.alpha)?;
    let means = unit_means(lambda_row, params);
    let mut terms = vec![0.0; params.h()];
    component_log_terms(y, &logits, &means, params.sigma2.as_slice(), &mut terms);
    Ok(log_sum_exp(&terms))
}

/// `f_x(y) = Σ_h π_h(x) φ{(y − λᵀβ_h)/σ_h}/σ_h`.
pub fn conditional_density(
    y: f64,
    lambda_row: &[f64],
    psi_row: &[f64],
    params: &MixtureParams,
) -> Result<f64> {
    Ok(log_conditional_density(y, lambda_row, psi_row, params)?.exp())
}

/// `pr(y < y* | x) = Σ_h π_h(x) Φ{(y* − λᵀβ_h)/σ_h}`.
pub fn conditional_cdf(
    y_star: f64,
    lambda_row: &[f64],
    psi_row: &[f64],
    params: &MixtureParams,
) -> Result<f64> {
    check_params(lambda_row, psi_row, params)?;
    let w = compute_weights(psi_row, &params.alpha)?;
    let means = unit_means(lambda_row, params);
    let cdf: f64 = (0..params.h())
        .map(|h| w.pi[h] * norm_cdf((y_star - means[h]) / params.sigma2[h].sqrt()))
        .sum();
    Ok(cdf.clamp(0.0, 1.0))
}

/// `Σ_i ln f_{x_i}(y_i)`; a unit whose density underflows yields `Underflow`.
pub fn log_likelihood(data: &Dataset, params: &MixtureParams) -> Result<f64> {
    check_dim("lambda columns", params.beta.ncols(), data.p())?;
    check_dim("psi columns", params.alpha.ncols(), data.r())?;
    let means = data.kernel_means(params);
    let logits = data.logits(params);
    let h = params.h();
    let mut terms = vec![0.0; h];
    let mut eta = vec![0.0; h - 1];
    let mut mu = vec![0.0; h];
    let mut total = 0.0;
    for i in 0..data.n() {
        for k in 0..h - 1 {
            eta[k] = logits[(i, k)];
        }
        for k in 0..h {
            mu[k] = means[(i, k)];
        }
        component_log_terms(data.y[i], &eta, &mu, params.sigma2.as_slice(), &mut terms);
        let l = log_sum_exp(&terms);
        if !l.is_finite() {
            return Err(LsbpError::Underflow { unit: i });
        }
        total += l;
    }
    Ok(total)
}

/// L1 bound `4 Σ_i {1 − μ_1ν(x_i)}^{H−1}` between the `H`-truncated and the
/// infinite marginal data densities.
pub fn truncation_bound(mu1nu: &[f64], h: usize) -> Result<f64> {
    if h < 2 {
        return Err(LsbpError::InvalidArgument("H must be ≥ 2".into()));
    }
    if let Some(bad) = mu1nu.iter().find(|&&m| !(m > 0.0 && m < 1.0)) {
        return Err(LsbpError::InvalidArgument(format!(
            "mean stick proportion {bad} outside (0, 1)"
        )));
    }
    let e = (h - 1) as i32;
    Ok(4.0 * mu1nu.iter().map(|m| (1.0 - m).powi(e)).sum::<f64>())
}
