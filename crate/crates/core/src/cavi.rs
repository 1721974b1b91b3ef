//! Mean-field variational Bayes by coordinate ascent.
//!
//! The variational family is
//! `∏_h q(α_h) ∏_h q(β_h) q(σ_h⁻²) ∏_{i,h} q(z_ih) q(ω_ih)` with Gaussian
//! `q(α_h)`, `q(β_h)`, Gamma `q(σ_h⁻²)`, Bernoulli `q(z_ih)` and
//! Pólya-Gamma `q(ω_ih) = PG(1, ξ_ih)`. Here `z_ih` are the sequential
//! stick indicators, so `ζ_ih = z_ih ∏_{l<h}(1 − z_il)`.
//!
//! A sweep updates the Bernoulli factors, the log-odds factors, the
//! Pólya-Gamma tilts and finally each kernel factor followed by its
//! precision factor. Each update maximizes the bound exactly in its block.
//!
//! The bound is
//!
//! ```text
//! ELBO = Σ_i Σ_h E[ζ_ih] { −½ ln 2π + ½ E ln τ_h − ½ E τ_h [(y_i − λ_iᵀm_h)² + λ_iᵀ S_h λ_i] }
//!      + Σ_i Σ_{h<H} { −ln 2 + (ρ_ih − ½) ψ_iᵀ m_αh − ½ E ω_ih (E η_ih² − ξ_ih²)
//!                      − ln cosh(ξ_ih / 2) + H(ρ_ih) }
//!      − Σ_h KL(q(α_h) ‖ p) − Σ_h KL(q(β_h) ‖ p) − Σ_h KL(q(τ_h) ‖ p),
//! ```
//!
//! using `Bern(z; logistic(η)) = ½ e^{(z−½)η} E_{PG(1,0)} e^{−ωη²/2}` and the
//! tilted density `PG(ω; 1, ξ) = cosh(ξ/2) e^{−ωξ²/2} PG(ω; 1, 0)`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::DesignMap;
use crate::density::{summarize_density, DensityGrid};
use crate::ecm::{e_step, restart_init};
use crate::error::{LsbpError, Result};
use crate::gibbs::{alpha_posterior, kernel_posterior, thread_pool};
use crate::linalg::{cholesky, kl_gaussian, sample_mvn};
use crate::model::{matrix_from_rows, matrix_to_rows, Dataset, MixtureParams, ModelConfig, PriorPrecisions};
use crate::polya_gamma::pg_mean;
use crate::rng::{purpose, RngStream};
use crate::special::{bernoulli_entropy, digamma, kl_gamma, log_cosh, logistic, LN_2PI};

/// Initial covariance scale for the Gaussian factors.
const INIT_COV: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    /// `n × (H − 1)` Bernoulli means; `ρ_iH = 1` is implicit.
    pub rho: DMatrix<f64>,
    /// `n × (H − 1)` Pólya-Gamma tilts.
    pub xi: DMatrix<f64>,
    pub alpha_mean: Vec<DVector<f64>>,
    pub alpha_cov: Vec<DMatrix<f64>>,
    pub beta_mean: Vec<DVector<f64>>,
    pub beta_cov: Vec<DMatrix<f64>>,
    pub gamma_shape: DVector<f64>,
    pub gamma_rate: DVector<f64>,
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
}

/// `E(ζ_i·)` from one row of Bernoulli means (length `H − 1`); length `H`.
pub fn expected_zeta(rho_row: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rho_row.len() + 1);
    let mut survivor = 1.0;
    for &r in rho_row {
        out.push(r * survivor);
        survivor *= 1.0 - r;
    }
    out.push(survivor);
    out
}

impl VariationalState {
    pub fn h(&self) -> usize {
        self.gamma_shape.len()
    }

    /// Every factor at its prior, with `ρ = ½` and zero tilts.
    pub fn at_prior(n: usize, config: &ModelConfig) -> Self {
        let h = config.h;
        VariationalState {
            rho: DMatrix::from_element(n, h - 1, 0.5),
            xi: DMatrix::zeros(n, h - 1),
            alpha_mean: vec![config.mu_alpha.clone(); h - 1],
            alpha_cov: vec![config.sigma_alpha.clone(); h - 1],
            beta_mean: vec![config.mu_beta.clone(); h],
            beta_cov: vec![config.sigma_beta.clone(); h],
            gamma_shape: DVector::from_element(h, config.a_sigma),
            gamma_rate: DVector::from_element(h, config.b_sigma),
            elbo_trace: Vec::new(),
            converged: false,
        }
    }

    /// Factors centred on a parameter point; Bernoulli means are the
    /// continuation ratios of the responsibilities at that point.
    pub fn from_params(params: &MixtureParams, data: &Dataset, config: &ModelConfig) -> Self {
        let h = params.h();
        let n = data.n();
        let e = e_step(params, data);
        let mut rho = DMatrix::zeros(n, h - 1);
        for i in 0..n {
            let mut tail: f64 = e.zeta.row(i).iter().sum();
            for k in 0..h - 1 {
                let r = if tail > 0.0 { e.zeta[(i, k)] / tail } else { 0.5 };
                rho[(i, k)] = r.clamp(1e-6, 1.0 - 1e-6);
                tail -= e.zeta[(i, k)];
            }
        }
        let eff = n as f64 / h as f64;
        let shape = DVector::from_element(h, config.a_sigma + 0.5 * eff);
        let rate = DVector::from_fn(h, |k, _| shape[k] * params.sigma2[k]);
        let mut s = VariationalState {
            rho,
            xi: DMatrix::zeros(n, h - 1),
            alpha_mean: (0..h - 1).map(|k| params.alpha.row(k).transpose()).collect(),
            alpha_cov: vec![DMatrix::identity(config.r(), config.r()) * INIT_COV; h - 1],
            beta_mean: (0..h).map(|k| params.beta.row(k).transpose()).collect(),
            beta_cov: vec![DMatrix::identity(config.p(), config.p()) * INIT_COV; h],
            gamma_shape: shape,
            gamma_rate: rate,
            elbo_trace: Vec::new(),
            converged: false,
        };
        update_xi(&mut s, data);
        s
    }

    pub fn expected_tau(&self, k: usize) -> f64 {
        self.gamma_shape[k] / self.gamma_rate[k]
    }

    pub fn expected_log_tau(&self, k: usize) -> f64 {
        digamma(self.gamma_shape[k]) - self.gamma_rate[k].ln()
    }

    /// `n × H` matrix of `E(ζ_ih)`.
    pub fn expected_zeta_matrix(&self) -> DMatrix<f64> {
        let (n, h) = (self.rho.nrows(), self.h());
        let mut z = DMatrix::zeros(n, h);
        for i in 0..n {
            let mut survivor = 1.0;
            for k in 0..h - 1 {
                let r = self.rho[(i, k)];
                z[(i, k)] = r * survivor;
                survivor *= 1.0 - r;
            }
            z[(i, h - 1)] = survivor;
        }
        z
    }

    pub fn expected_zeta_row(&self, i: usize) -> Vec<f64> {
        let row: Vec<f64> = self.rho.row(i).iter().copied().collect();
        expected_zeta(&row)
    }

    /// `E(ω_ih)` under `PG(1, ξ_ih)`.
    pub fn expected_omega(&self, i: usize, k: usize) -> f64 {
        pg_mean(self.xi[(i, k)])
    }

    /// Plug-in point at the factor means (`σ² = rate / shape`).
    pub fn mean_params(&self) -> MixtureParams {
        let h = self.h();
        let r = self.alpha_mean.first().map_or(0, |m| m.len());
        let p = self.beta_mean[0].len();
        MixtureParams {
            alpha: DMatrix::from_fn(h - 1, r, |k, j| self.alpha_mean[k][j]),
            beta: DMatrix::from_fn(h, p, |k, j| self.beta_mean[k][j]),
            sigma2: DVector::from_fn(h, |k, _| 1.0 / self.expected_tau(k)),
        }
    }
}

/// Per-unit `x_iᵀm` and `x_iᵀ S x_i` for the rows of `x`.
fn quad_forms(x: &DMatrix<f64>, m: &DVector<f64>, s: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let mean = x * m;
    let xs = x * s;
    let quad = xs.component_mul(x).column_sum();
    (mean, quad)
}

/// `n × H` matrix of `E{(y_i − λ_iᵀβ_h)²}` under the kernel factors.
fn expected_sq_residuals(state: &VariationalState, data: &Dataset) -> DMatrix<f64> {
    let h = state.h();
    let mut out = DMatrix::zeros(data.n(), h);
    for k in 0..h {
        let (mean, quad) = quad_forms(&data.lambda, &state.beta_mean[k], &state.beta_cov[k]);
        for i in 0..data.n() {
            out[(i, k)] = (data.y[i] - mean[i]).powi(2) + quad[i];
        }
    }
    out
}

/// `n × (H − 1)` matrices of `E η_ih` and `E η_ih²` for `η = ψ_iᵀα_h`.
fn eta_moments(state: &VariationalState, data: &Dataset) -> (DMatrix<f64>, DMatrix<f64>) {
    let h = state.h();
    let n = data.n();
    let mut e1 = DMatrix::zeros(n, h - 1);
    let mut e2 = DMatrix::zeros(n, h - 1);
    for k in 0..h - 1 {
        let (mean, quad) = quad_forms(&data.psi, &state.alpha_mean[k], &state.alpha_cov[k]);
        for i in 0..n {
            e1[(i, k)] = mean[i];
            e2[(i, k)] = mean[i] * mean[i] + quad[i];
        }
    }
    (e1, e2)
}

/// Bernoulli updates, sequential in `h` within each unit.
pub fn update_rho(state: &mut VariationalState, data: &Dataset) {
    if state.h() == 1 {
        return;
    }
    let esr = expected_sq_residuals(state, data);
    let (eta, _) = eta_moments(state, data);
    rho_step(state, data, &esr, &eta);
}

fn rho_step(state: &mut VariationalState, data: &Dataset, esr: &DMatrix<f64>, eta: &DMatrix<f64>) {
    let h = state.h();
    let n = data.n();
    if h == 1 {
        return;
    }
    let e_tau: Vec<f64> = (0..h).map(|k| state.expected_tau(k)).collect();
    let e_log_tau: Vec<f64> = (0..h).map(|k| state.expected_log_tau(k)).collect();
    let s = &*state;
    let mut out = vec![0.0; n * (h - 1)];
    out.par_chunks_mut(h - 1)
        .with_min_len(256)
        .enumerate()
        .for_each_init(
            || (vec![0.0; h], vec![0.0; h]),
            |(ell, rho), (i, row)| {
                // expected log kernel without the constant, per component
                for k in 0..h {
                    ell[k] = 0.5 * e_log_tau[k] - 0.5 * e_tau[k] * esr[(i, k)];
                    rho[k] = if k + 1 < h { s.rho[(i, k)] } else { 1.0 };
                }
                for k in 0..h - 1 {
                    let mut logit = eta[(i, k)];
                    let lead: f64 = rho[..k].iter().map(|r| 1.0 - r).product();
                    logit += lead * ell[k];
                    // l > k: −ρ_il ∏_{r<l, r≠k} (1 − ρ_ir)
                    let mut prod_excl = lead;
                    for l in k + 1..h {
                        logit -= rho[l] * prod_excl * ell[l];
                        prod_excl *= 1.0 - rho[l];
                    }
                    rho[k] = logistic(logit);
                }
                row.copy_from_slice(&rho[..h - 1]);
            },
        );
    for i in 0..n {
        for k in 0..h - 1 {
            state.rho[(i, k)] = out[i * (h - 1) + k];
        }
    }
}

/// Log-odds factors given Bernoulli means and Pólya-Gamma tilts.
pub fn update_alpha(state: &mut VariationalState, data: &Dataset, prec: &PriorPrecisions) -> Result<()> {
    let h = state.h();
    let n = data.n();
    let s = &*state;
    let updated: Vec<(DVector<f64>, DMatrix<f64>)> = (0..h - 1)
        .into_par_iter()
        .map(|k| {
            let terms: Vec<(usize, f64, f64)> = (0..n)
                .map(|i| (i, s.expected_omega(i, k), s.rho[(i, k)] - 0.5))
                .collect();
            let post = alpha_posterior(&data.psi, &terms, prec)?;
            let cov = post.covariance();
            Ok((post.mean, cov))
        })
        .collect::<Result<_>>()?;
    for (k, (m, c)) in updated.into_iter().enumerate() {
        state.alpha_mean[k] = m;
        state.alpha_cov[k] = c;
    }
    Ok(())
}

/// `ξ_ih² = ψ_iᵀ E(α_h α_hᵀ) ψ_i`.
pub fn update_xi(state: &mut VariationalState, data: &Dataset) {
    let (_, e2) = eta_moments(state, data);
    state.xi = e2.map(|v| v.max(0.0).sqrt());
}

/// Each kernel factor given the current precision factor, then the
/// precision factor given the new kernel factor.
pub fn update_kernels(
    state: &mut VariationalState,
    data: &Dataset,
    config: &ModelConfig,
    prec: &PriorPrecisions,
) -> Result<()> {
    kernels_step(state, data, config, prec).map(|_| ())
}

/// Kernel and precision update; returns the `n × H` expected squared
/// residuals under the new kernel factors.
fn kernels_step(
    state: &mut VariationalState,
    data: &Dataset,
    config: &ModelConfig,
    prec: &PriorPrecisions,
) -> Result<DMatrix<f64>> {
    let h = state.h();
    let n = data.n();
    let zeta = state.expected_zeta_matrix();
    let s = &*state;
    let updated: Vec<(DVector<f64>, DMatrix<f64>, f64, f64, DVector<f64>)> = (0..h)
        .into_par_iter()
        .map(|k| {
            let terms: Vec<(usize, f64)> = (0..n).map(|i| (i, zeta[(i, k)])).collect();
            let post = kernel_posterior(data, &terms, s.expected_tau(k), prec)?;
            let cov = post.covariance();
            let (mean, quad) = quad_forms(&data.lambda, &post.mean, &cov);
            let esr = DVector::from_fn(n, |i, _| (data.y[i] - mean[i]).powi(2) + quad[i]);
            let mut weight = 0.0;
            let mut ess = 0.0;
            for &(i, z) in &terms {
                weight += z;
                ess += z * esr[i];
            }
            Ok((
                post.mean,
                cov,
                config.a_sigma + 0.5 * weight,
                config.b_sigma + 0.5 * ess,
                esr,
            ))
        })
        .collect::<Result<_>>()?;
    let mut esr = DMatrix::zeros(n, h);
    for (k, (m, c, a, b, e)) in updated.into_iter().enumerate() {
        state.beta_mean[k] = m;
        state.beta_cov[k] = c;
        state.gamma_shape[k] = a;
        state.gamma_rate[k] = b;
        esr.set_column(k, &e);
    }
    Ok(esr)
}

/// Steps for the unit-level factors: Bernoulli means, then tilts.
pub fn update_local(state: &mut VariationalState, data: &Dataset) {
    update_rho(state, data);
    update_xi(state, data);
}

/// Steps for the global factors: log-odds, then kernels and precisions.
pub fn update_global(
    state: &mut VariationalState,
    data: &Dataset,
    config: &ModelConfig,
    prec: &PriorPrecisions,
) -> Result<()> {
    update_alpha(state, data, prec)?;
    update_kernels(state, data, config, prec)
}

/// One full sweep in the fixed order: Bernoulli means, log-odds factors,
/// tilts, kernel and precision factors.
pub fn sweep(
    state: &mut VariationalState,
    data: &Dataset,
    config: &ModelConfig,
    prec: &PriorPrecisions,
) -> Result<()> {
    let mut m = Moments::of(state, data);
    sweep_with(state, data, config, prec, &mut m)
}

/// Expected squared residuals and log-odds moments of the current state.
struct Moments {
    esr: DMatrix<f64>,
    eta1: DMatrix<f64>,
    eta2: DMatrix<f64>,
}

impl Moments {
    fn of(state: &VariationalState, data: &Dataset) -> Self {
        let (eta1, eta2) = eta_moments(state, data);
        Moments {
            esr: expected_sq_residuals(state, data),
            eta1,
            eta2,
        }
    }
}

/// Sweep that reuses `m` on entry and leaves it matching the new state.
fn sweep_with(
    state: &mut VariationalState,
    data: &Dataset,
    config: &ModelConfig,
    prec: &PriorPrecisions,
    m: &mut Moments,
) -> Result<()> {
    rho_step(state, data, &m.esr, &m.eta1);
    update_alpha(state, data, prec)?;
    let (eta1, eta2) = eta_moments(state, data);
    state.xi = eta2.map(|v| v.max(0.0).sqrt());
    m.eta1 = eta1;
    m.eta2 = eta2;
    m.esr = kernels_step(state, data, config, prec)?;
    Ok(())
}

pub fn compute_elbo(
    state: &VariationalState,
    data: &Dataset,
    config: &ModelConfig,
    prec: &PriorPrecisions,
) -> Result<f64> {
    elbo_with(state, data, config, prec, &Moments::of(state, data))
}

fn elbo_with(
    state: &VariationalState,
    data: &Dataset,
    config: &ModelConfig,
    prec: &PriorPrecisions,
    m: &Moments,
) -> Result<f64> {
    let h = state.h();
    let n = data.n();
    let e_tau: Vec<f64> = (0..h).map(|k| state.expected_tau(k)).collect();
    let e_log_tau: Vec<f64> = (0..h).map(|k| state.expected_log_tau(k)).collect();
    let Moments { esr, eta1, eta2 } = m;
    let per_unit: Vec<f64> = (0..n)
        .into_par_iter()
        .with_min_len(256)
        .map(|i| {
            let mut v = 0.0;
            let mut survivor = 1.0;
            for k in 0..h {
                let zeta = if k + 1 < h {
                    let r = state.rho[(i, k)];
                    let z = r * survivor;
                    survivor *= 1.0 - r;
                    z
                } else {
                    survivor
                };
                if zeta == 0.0 {
                    continue;
                }
                v += zeta * (-0.5 * LN_2PI + 0.5 * e_log_tau[k] - 0.5 * e_tau[k] * esr[(i, k)]);
            }
            for k in 0..h - 1 {
                let (e1, e2) = (eta1[(i, k)], eta2[(i, k)]);
                let xi = state.xi[(i, k)];
                let rho = state.rho[(i, k)];
                let gap = e2 - xi * xi;
                // the tilt term vanishes right after the ξ update
                let tilt = if gap == 0.0 { 0.0 } else { 0.5 * pg_mean(xi) * gap };
                v += -std::f64::consts::LN_2 + (rho - 0.5) * e1 - tilt - log_cosh(0.5 * xi)
                    + bernoulli_entropy(rho);
            }
            v
        })
        .collect();
    let mut elbo: f64 = per_unit.iter().sum();
    for k in 0..h - 1 {
        elbo -= kl_gaussian(
            &state.alpha_mean[k],
            &state.alpha_cov[k],
            &config.mu_alpha,
            &prec.alpha_prec,
            prec.alpha_logdet_cov,
        )?;
    }
    for k in 0..h {
        elbo -= kl_gaussian(
            &state.beta_mean[k],
            &state.beta_cov[k],
            &config.mu_beta,
            &prec.beta_prec,
            prec.beta_logdet_cov,
        )?;
        elbo -= kl_gamma(state.gamma_shape[k], state.gamma_rate[k], config.a_sigma, config.b_sigma);
    }
    if !elbo.is_finite() {
        return Err(LsbpError::NumericalFailure("evidence lower bound is not finite".into()));
    }
    Ok(elbo)
}

/// Sweeps from `state` until the relative bound change drops below `tol`.
pub fn fit_from(
    mut state: VariationalState,
    data: &Dataset,
    config: &ModelConfig,
    prec: &PriorPrecisions,
    tol: f64,
    max_iter: usize,
) -> Result<VariationalState> {
    let mut m = Moments::of(&state, data);
    let mut prev = elbo_with(&state, data, config, prec, &m)?;
    state.elbo_trace = vec![prev];
    state.converged = false;
    for it in 0..max_iter {
        sweep_with(&mut state, data, config, prec, &mut m).map_err(|e| e.at_iteration(it))?;
        let elbo = elbo_with(&state, data, config, prec, &m).map_err(|e| e.at_iteration(it))?;
        state.elbo_trace.push(elbo);
        let rel = (elbo - prev).abs() / elbo.abs().max(1e-300);
        prev = elbo;
        if rel < tol {
            state.converged = true;
            break;
        }
    }
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CaviSettings {
    pub n_restarts: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Default for CaviSettings {
    fn default() -> Self {
        CaviSettings {
            n_restarts: 10,
            tol: 1e-8,
            max_iter: 1000,
            seed: 0,
            threads: None,
        }
    }
}

impl CaviSettings {
    pub fn validate(&self) -> Result<()> {
        crate::ecm::EcmSettings {
            n_restarts: self.n_restarts,
            tol: self.tol,
            max_iter: self.max_iter,
            seed: self.seed,
            threads: self.threads,
        }
        .validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaviRestart {
    pub restart: usize,
    pub final_elbo: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaviRun {
    pub best: VariationalState,
    pub best_restart: usize,
    pub restarts: Vec<CaviRestart>,
    pub elapsed_secs: f64,
}

/// Runs every restart (initialized like the mode search) and keeps the
/// highest final bound.
pub fn run_cavi(data: &Dataset, config: &ModelConfig, settings: &CaviSettings) -> Result<CaviRun> {
    settings.validate()?;
    config.validate()?;
    data.require_nonempty()?;
    data.check_against(config)?;
    let prec = config.precisions()?;
    let root = RngStream::new(settings.seed);
    let start = Instant::now();
    let results: Vec<Result<VariationalState>> = thread_pool(settings.threads)?.install(|| {
        (0..settings.n_restarts)
            .into_par_iter()
            .map(|r| {
                let init = restart_init(data, config, &prec, &root, r)?;
                let state = VariationalState::from_params(&init, data, config);
                fit_from(state, data, config, &prec, settings.tol, settings.max_iter)
            })
            .collect()
    });
    let mut restarts = Vec::with_capacity(results.len());
    let mut best: Option<(usize, VariationalState)> = None;
    let mut last_err = String::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(s) => {
                let f = *s.elbo_trace.last().expect("trace starts non-empty");
                restarts.push(CaviRestart {
                    restart: r,
                    final_elbo: Some(f),
                    iterations: s.elbo_trace.len() - 1,
                    converged: s.converged,
                    error: None,
                });
                if best
                    .as_ref()
                    .is_none_or(|(_, b)| f > *b.elbo_trace.last().expect("non-empty"))
                {
                    best = Some((r, s));
                }
            }
            Err(e) => {
                last_err = e.to_string();
                restarts.push(CaviRestart {
                    restart: r,
                    final_elbo: None,
                    iterations: 0,
                    converged: false,
                    error: Some(last_err.clone()),
                });
            }
        }
    }
    let (best_restart, best) = best.ok_or(LsbpError::AllRestartsFailed {
        restarts: settings.n_restarts,
        last: last_err,
    })?;
    Ok(CaviRun {
        best,
        best_restart,
        restarts,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

/// Independent parameter draws from the factorized approximation; draw `s`
/// uses sub-stream `(SUMMARY, s)` of `rng`.
pub fn sample_q(state: &VariationalState, n: usize, rng: &RngStream) -> Result<Vec<MixtureParams>> {
    let h = state.h();
    let chol_a: Vec<DMatrix<f64>> = state
        .alpha_cov
        .iter()
        .map(|c| Ok(cholesky(c, "log-odds factor covariance")?.l()))
        .collect::<Result<_>>()?;
    let chol_b: Vec<DMatrix<f64>> = state
        .beta_cov
        .iter()
        .map(|c| Ok(cholesky(c, "kernel factor covariance")?.l()))
        .collect::<Result<_>>()?;
    let gammas: Vec<Gamma<f64>> = (0..h)
        .map(|k| {
            Gamma::new(state.gamma_shape[k], 1.0 / state.gamma_rate[k])
                .map_err(|e| LsbpError::NumericalFailure(format!("precision factor: {e}")))
        })
        .collect::<Result<_>>()?;
    let template = state.mean_params();
    Ok((0..n)
        .into_par_iter()
        .map(|s| {
            let mut r = rng.substream(&[purpose::SUMMARY, s as u64]);
            let mut p = template.clone();
            for k in 0..h - 1 {
                let a = sample_mvn(&state.alpha_mean[k], &chol_a[k], &mut r);
                p.alpha.set_row(k, &a.transpose());
            }
            for k in 0..h {
                let b = sample_mvn(&state.beta_mean[k], &chol_b[k], &mut r);
                p.beta.set_row(k, &b.transpose());
                let tau: f64 = gammas[k].sample(&mut r);
                p.sigma2[k] = 1.0 / tau.max(f64::MIN_POSITIVE);
            }
            p
        })
        .collect())
}

/// Pointwise mean and 95% band of the conditional density over draws from `q`.
pub fn variational_density_summary(
    state: &VariationalState,
    x_grid: &[f64],
    y_grid: &[f64],
    n_q_samples: usize,
    rng: &RngStream,
    map: &DesignMap,
) -> Result<DensityGrid> {
    if n_q_samples < 2 {
        return Err(LsbpError::InvalidArgument("n_q_samples must be ≥ 2".into()));
    }
    let draws = sample_q(state, n_q_samples, rng)?;
    summarize_density(&draws, x_grid, y_grid, map)
}

/// JSON form of a variational fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationalReport {
    pub alpha_mean: Vec<Vec<f64>>,
    pub alpha_cov: Vec<Vec<Vec<f64>>>,
    pub beta_mean: Vec<Vec<f64>>,
    pub beta_cov: Vec<Vec<Vec<f64>>>,
    pub gamma_shape: Vec<f64>,
    pub gamma_rate: Vec<f64>,
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
    pub best_restart: usize,
    pub restarts: Vec<CaviRestart>,
}

impl CaviRun {
    pub fn report(&self) -> VariationalReport {
        let s = &self.best;
        VariationalReport {
            alpha_mean: s.alpha_mean.iter().map(|m| m.iter().copied().collect()).collect(),
            alpha_cov: s.alpha_cov.iter().map(matrix_to_rows).collect(),
            beta_mean: s.beta_mean.iter().map(|m| m.iter().copied().collect()).collect(),
            beta_cov: s.beta_cov.iter().map(matrix_to_rows).collect(),
            gamma_shape: s.gamma_shape.iter().copied().collect(),
            gamma_rate: s.gamma_rate.iter().copied().collect(),
            elbo_trace: s.elbo_trace.clone(),
            converged: s.converged,
            best_restart: self.best_restart,
            restarts: self.restarts.clone(),
        }
    }
}

impl VariationalReport {
    /// Global factors of the saved fit; the per-unit factors are not stored.
    pub fn to_state(&self) -> Result<VariationalState> {
        let h = self.gamma_shape.len();
        if h == 0
            || self.alpha_mean.len() + 1 != h
            || self.alpha_cov.len() + 1 != h
            || self.beta_mean.len() != h
            || self.beta_cov.len() != h
            || self.gamma_rate.len() != h
        {
            return Err(LsbpError::InvalidArgument("inconsistent variational report".into()));
        }
        let vecs = |v: &[Vec<f64>]| -> Vec<DVector<f64>> {
            v.iter().map(|m| DVector::from_vec(m.clone())).collect()
        };
        let mats = |v: &[Vec<Vec<f64>>], what: &str| -> Result<Vec<DMatrix<f64>>> {
            v.iter().map(|m| matrix_from_rows(m, what)).collect()
        };
        Ok(VariationalState {
            rho: DMatrix::zeros(0, h - 1),
            xi: DMatrix::zeros(0, h - 1),
            alpha_mean: vecs(&self.alpha_mean),
            alpha_cov: mats(&self.alpha_cov, "alpha_cov")?,
            beta_mean: vecs(&self.beta_mean),
            beta_cov: mats(&self.beta_cov, "beta_cov")?,
            gamma_shape: DVector::from_vec(self.gamma_shape.clone()),
            gamma_rate: DVector::from_vec(self.gamma_rate.clone()),
            elbo_trace: self.elbo_trace.clone(),
            converged: self.converged,
        })
    }
}
