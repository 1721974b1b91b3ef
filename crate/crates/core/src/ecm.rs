//! Expectation conditional maximization for the posterior mode.
//!
//! The E-step computes membership responsibilities `ζ̂` and the expected
//! Pólya-Gamma augmentations `ω̄̂`. The M-step maximizes the expected
//! complete log-posterior over each stick's coefficients, then over the
//! kernel coefficients given the current precisions, then over the
//! precisions given the new kernel coefficients. Each conditional
//! maximization is exact, so the observed log-posterior cannot decrease.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LsbpError, Result};
use crate::gibbs::{alpha_posterior, kernel_posterior, thread_pool};
use crate::init::initial_params;
use crate::linalg::log_mvn_kernel;
use crate::model::{allocation_probabilities, log_likelihood, Dataset, MixtureParams, ModelConfig, PriorPrecisions};
use crate::polya_gamma::pg_mean;
use crate::rng::{purpose, RngStream};

/// Lower bound on a component precision when the Gamma-mode guard activates.
pub const TAU_FLOOR: f64 = 1e-6;

/// Expected augmented data: `zeta` is `n × H`; `omega_bar` and `kappa_bar` are `n × (H − 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EStep {
    pub zeta: DMatrix<f64>,
    pub omega_bar: DMatrix<f64>,
    pub kappa_bar: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcmState {
    pub params: MixtureParams,
    pub zeta_hat: DMatrix<f64>,
    pub omega_bar_hat: DMatrix<f64>,
    /// Observed log-posterior at the start and after every iteration.
    pub log_posterior_trace: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EcmSettings {
    pub n_restarts: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Default for EcmSettings {
    fn default() -> Self {
        EcmSettings {
            n_restarts: 10,
            tol: 1e-8,
            max_iter: 1000,
            seed: 0,
            threads: None,
        }
    }
}

impl EcmSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(LsbpError::InvalidArgument("tol must be positive".into()));
        }
        if self.n_restarts == 0 || self.max_iter == 0 {
            return Err(LsbpError::InvalidArgument(
                "n_restarts and max_iter must be ≥ 1".into(),
            ));
        }
        if self.threads == Some(0) {
            return Err(LsbpError::InvalidArgument("threads must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RestartSummary {
    pub restart: usize,
    pub final_objective: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcmRun {
    pub best: EcmState,
    pub best_restart: usize,
    pub restarts: Vec<RestartSummary>,
    pub elapsed_secs: f64,
}

/// JSON form of a fitted mode.
#[derive(Debug, Clone, Serialize)]
pub struct EcmReport<'a> {
    pub params: &'a MixtureParams,
    pub log_posterior_trace: &'a [f64],
    pub converged: bool,
    pub best_restart: usize,
    pub restarts: &'a [RestartSummary],
}

impl EcmRun {
    pub fn report(&self) -> EcmReport<'_> {
        EcmReport {
            params: &self.best.params,
            log_posterior_trace: &self.best.log_posterior_trace,
            converged: self.best.converged,
            best_restart: self.best_restart,
            restarts: &self.restarts,
        }
    }
}

pub fn e_step(params: &MixtureParams, data: &Dataset) -> EStep {
    let h = params.h();
    let n = data.n();
    let means = data.kernel_means(params);
    let logits = data.logits(params);
    let sigma2 = params.sigma2.as_slice();
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .with_min_len(256)
        .map(|i| {
            let eta: Vec<f64> = (0..h - 1).map(|k| logits[(i, k)]).collect();
            let mu: Vec<f64> = (0..h).map(|k| means[(i, k)]).collect();
            let mut z = vec![0.0; h];
            allocation_probabilities(data.y[i], &eta, &mu, sigma2, &mut z);
            let mut om = vec![0.0; h - 1];
            let mut ka = vec![0.0; h - 1];
            let mut tail = 0.0;
            let mut tails = vec![0.0; h];
            for k in (0..h).rev() {
                tail += z[k];
                tails[k] = tail;
            }
            for k in 0..h - 1 {
                om[k] = pg_mean(eta[k]) * tails[k];
                ka[k] = z[k] - 0.5 * tails[k];
            }
            (z, om, ka)
        })
        .collect();
    let mut zeta = DMatrix::zeros(n, h);
    let mut omega_bar = DMatrix::zeros(n, h - 1);
    let mut kappa_bar = DMatrix::zeros(n, h - 1);
    for (i, (z, om, ka)) in rows.into_iter().enumerate() {
        for k in 0..h {
            zeta[(i, k)] = z[k];
        }
        for k in 0..h - 1 {
            omega_bar[(i, k)] = om[k];
            kappa_bar[(i, k)] = ka[k];
        }
    }
    EStep {
        zeta,
        omega_bar,
        kappa_bar,
    }
}

/// Precision update for one component: the Gamma-mode expression with the
/// `max{0, ·}` guard, floored at [`TAU_FLOOR`].
pub fn precision_mode(config: &ModelConfig, weight: f64, weighted_rss: f64) -> f64 {
    let num = config.a_sigma + 0.5 * weight - 1.0;
    let den = config.b_sigma + 0.5 * weighted_rss;
    (num / den).max(0.0).max(TAU_FLOOR)
}

pub fn m_step(
    e: &EStep,
    data: &Dataset,
    config: &ModelConfig,
    prec: &PriorPrecisions,
    prev: &MixtureParams,
) -> Result<MixtureParams> {
    let h = prev.h();
    let n = data.n();
    let alphas: Vec<DVector<f64>> = (0..h - 1)
        .into_par_iter()
        .map(|k| {
            let terms: Vec<(usize, f64, f64)> = (0..n)
                .map(|i| (i, e.omega_bar[(i, k)], e.kappa_bar[(i, k)]))
                .collect();
            Ok(alpha_posterior(&data.psi, &terms, prec)?.mean)
        })
        .collect::<Result<_>>()?;
    let kernels: Vec<(DVector<f64>, f64)> = (0..h)
        .into_par_iter()
        .map(|k| {
            let terms: Vec<(usize, f64)> = (0..n).map(|i| (i, e.zeta[(i, k)])).collect();
            let beta = kernel_posterior(data, &terms, 1.0 / prev.sigma2[k], prec)?.mean;
            let mut weight = 0.0;
            let mut rss = 0.0;
            for &(i, z) in &terms {
                weight += z;
                rss += z * (data.y[i] - data.lambda.row(i).dot(&beta.transpose())).powi(2);
            }
            let tau = precision_mode(config, weight, rss);
            Ok((beta, 1.0 / tau))
        })
        .collect::<Result<_>>()?;
    let mut next = prev.clone();
    for (k, a) in alphas.iter().enumerate() {
        next.alpha.set_row(k, &a.transpose());
    }
    for (k, (b, s2)) in kernels.into_iter().enumerate() {
        next.beta.set_row(k, &b.transpose());
        next.sigma2[k] = s2;
    }
    Ok(next)
}

/// Log prior kernels (no normalizing constants): Gaussian on every `α_h`
/// and `β_h`, Gamma on every `σ_h⁻²`.
pub fn log_prior_kernel(params: &MixtureParams, config: &ModelConfig, prec: &PriorPrecisions) -> f64 {
    let mut lp = 0.0;
    for k in 0..params.alpha.nrows() {
        let a = params.alpha.row(k).transpose();
        lp += log_mvn_kernel(&a, &config.mu_alpha, &prec.alpha_prec);
    }
    for k in 0..params.h() {
        let b = params.beta.row(k).transpose();
        lp += log_mvn_kernel(&b, &config.mu_beta, &prec.beta_prec);
        let tau = 1.0 / params.sigma2[k];
        lp += (config.a_sigma - 1.0) * tau.ln() - config.b_sigma * tau;
    }
    lp
}

/// `Σ_i ln f_{x_i}(y_i)` plus the log prior kernels.
pub fn observed_log_posterior(
    params: &MixtureParams,
    data: &Dataset,
    config: &ModelConfig,
    prec: &PriorPrecisions,
) -> Result<f64> {
    Ok(log_likelihood(data, params)? + log_prior_kernel(params, config, prec))
}

/// Iterates E- and M-steps from `init` until the relative objective change
/// drops below `tol` or `max_iter` iterations have run.
pub fn fit_from(
    data: &Dataset,
    config: &ModelConfig,
    prec: &PriorPrecisions,
    init: MixtureParams,
    tol: f64,
    max_iter: usize,
) -> Result<EcmState> {
    let mut params = init;
    let mut obj = observed_log_posterior(&params, data, config, prec)?;
    let mut trace = vec![obj];
    let mut converged = false;
    let mut e = e_step(&params, data);
    for it in 0..max_iter {
        params = m_step(&e, data, config, prec, &params).map_err(|err| err.at_iteration(it))?;
        let next = observed_log_posterior(&params, data, config, prec)
            .map_err(|err| err.at_iteration(it))?;
        if !next.is_finite() {
            return Err(LsbpError::NumericalFailure("objective is not finite".into()).at_iteration(it));
        }
        trace.push(next);
        e = e_step(&params, data);
        let rel = (next - obj).abs() / next.abs().max(1e-300);
        obj = next;
        if rel < tol {
            converged = true;
            break;
        }
    }
    Ok(EcmState {
        params,
        zeta_hat: e.zeta,
        omega_bar_hat: e.omega_bar,
        log_posterior_trace: trace,
        converged,
    })
}

/// Jitter applied to the k-means features for restarts after the first.
pub(crate) const RESTART_JITTER: f64 = 0.25;

pub(crate) fn restart_init(
    data: &Dataset,
    config: &ModelConfig,
    prec: &PriorPrecisions,
    root: &RngStream,
    restart: usize,
) -> Result<MixtureParams> {
    let mut r = root.substream(&[purpose::RESTART, restart as u64]);
    let jitter = if restart == 0 { 0.0 } else { RESTART_JITTER };
    Ok(initial_params(data, config, prec, jitter, &mut r)?.1)
}

/// Runs every restart and keeps the one with the highest final objective.
pub fn run_ecm(data: &Dataset, config: &ModelConfig, settings: &EcmSettings) -> Result<EcmRun> {
    settings.validate()?;
    config.validate()?;
    data.require_nonempty()?;
    data.check_against(config)?;
    let prec = config.precisions()?;
    let root = RngStream::new(settings.seed);
    let start = Instant::now();
    let results: Vec<Result<EcmState>> = thread_pool(settings.threads)?.install(|| {
        (0..settings.n_restarts)
            .into_par_iter()
            .map(|r| {
                let init = restart_init(data, config, &prec, &root, r)?;
                fit_from(data, config, &prec, init, settings.tol, settings.max_iter)
            })
            .collect()
    });
    let summaries: Vec<RestartSummary> = results
        .iter()
        .enumerate()
        .map(|(r, res)| match res {
            Ok(s) => RestartSummary {
                restart: r,
                final_objective: s.log_posterior_trace.last().copied(),
                iterations: s.log_posterior_trace.len() - 1,
                converged: s.converged,
                error: None,
            },
            Err(e) => RestartSummary {
                restart: r,
                final_objective: None,
                iterations: 0,
                converged: false,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let mut best: Option<(usize, EcmState)> = None;
    let mut last_err = String::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(s) => {
                let f = *s.log_posterior_trace.last().expect("trace starts non-empty");
                let better = best
                    .as_ref()
                    .is_none_or(|(_, b)| f > *b.log_posterior_trace.last().expect("non-empty"));
                if better {
                    best = Some((r, s));
                }
            }
            Err(e) => last_err = e.to_string(),
        }
    }
    let (best_restart, best) = best.ok_or(LsbpError::AllRestartsFailed {
        restarts: settings.n_restarts,
        last: last_err,
    })?;
    Ok(EcmRun {
        best,
        best_restart,
        restarts: summaries,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
