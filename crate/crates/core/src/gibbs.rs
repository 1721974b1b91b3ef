//! Gibbs sampler for the truncated mixture with Pólya-Gamma augmentation of
//! the stick-breaking logistic regressions.
//!
//! One sweep updates, in order:
//!
//! 1. memberships `G_i` from their categorical full conditionals;
//! 2. for each stick `h < H − 1`, the augmentations `ω_ih ~ PG(1, ψ_iᵀα_h)`
//!    of the units still at risk (`G_i ≥ h`), then `α_h` from its Gaussian
//!    full conditional;
//! 3. each `β_h` given `σ_h²` from the conjugate Gaussian regression update;
//! 4. each `σ_h⁻²` given the new `β_h` from its Gamma full conditional.
//!
//! Every random draw comes from a sub-stream addressed by
//! `(sweep, purpose, index)`, so output does not depend on thread count.

use std::io::{Read, Write};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::Serialize;

use crate::basis::DesignMap;
use crate::density::{summarize_density, DensityGrid};
use crate::error::{LsbpError, Result};
use crate::init::initial_params;
use crate::linalg::GaussianCanonical;
use crate::model::{allocation_probabilities, Dataset, MixtureParams, ModelConfig, PriorPrecisions};
use crate::polya_gamma::sample_pg1;
use crate::rng::{purpose, RngStream};

const MIN_PARALLEL_UNITS: usize = 256;

/// Augmented sampler state. `g` holds 0-based memberships; `omega[(i, h)]`
/// is the most recent Pólya-Gamma draw for units at risk at stick `h`
/// (`g[i] ≥ h`) and zero otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    pub params: MixtureParams,
    pub g: Vec<usize>,
    pub omega: DMatrix<f64>,
}

impl GibbsState {
    pub fn new(params: MixtureParams, g: Vec<usize>) -> Self {
        let h = params.h();
        let n = g.len();
        GibbsState {
            params,
            g,
            omega: DMatrix::zeros(n, h - 1),
        }
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.params.h()];
        for &k in &self.g {
            c[k] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChainSettings {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Worker threads; `None` uses every available core.
    pub threads: Option<usize>,
}

impl ChainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(LsbpError::InvalidArgument(
                "iterations must exceed burn_in".into(),
            ));
        }
        if self.thin == 0 {
            return Err(LsbpError::InvalidArgument("thin must be ≥ 1".into()));
        }
        if self.threads == Some(0) {
            return Err(LsbpError::InvalidArgument("threads must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainDiagnostics {
    /// Average number of non-empty components over retained sweeps.
    pub mean_occupied: f64,
    /// Average share of units in each component over retained sweeps.
    pub mean_share: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub draws: Vec<MixtureParams>,
    pub settings: ChainSettings,
    pub diagnostics: ChainDiagnostics,
    pub elapsed_secs: f64,
}

/// Full conditional of a stick's coefficients given augmentations:
/// precision `Σ ω_i ψ_iψ_iᵀ + Σ_α⁻¹`, linear term `Σ κ_i ψ_i + Σ_α⁻¹μ_α`.
/// Each term is `(unit, ω_i, κ_i)`.
pub fn alpha_posterior(
    psi: &DMatrix<f64>,
    terms: &[(usize, f64, f64)],
    prec: &PriorPrecisions,
) -> Result<GaussianCanonical> {
    let r = psi.ncols();
    let rows = DMatrix::from_fn(terms.len(), r, |t, j| psi[(terms[t].0, j)]);
    let scaled = DMatrix::from_fn(terms.len(), r, |t, j| terms[t].1 * rows[(t, j)]);
    let kappa = DVector::from_fn(terms.len(), |t, _| terms[t].2);
    let mut q = &prec.alpha_prec + rows.tr_mul(&scaled);
    symmetrize_lower(&mut q);
    let b = &prec.alpha_shift + rows.tr_mul(&kappa);
    GaussianCanonical::new(q, &b, "log-odds coefficient")
}

/// Full conditional of kernel coefficients given the precision `tau` of a
/// component and per-unit weights (1 for hard memberships):
/// precision `τ Σ w_i λ_iλ_iᵀ + Σ_β⁻¹`, linear term `τ Σ w_i y_i λ_i + Σ_β⁻¹μ_β`.
pub fn kernel_posterior(
    data: &Dataset,
    terms: &[(usize, f64)],
    tau: f64,
    prec: &PriorPrecisions,
) -> Result<GaussianCanonical> {
    let p = data.p();
    let rows = DMatrix::from_fn(terms.len(), p, |t, j| data.lambda[(terms[t].0, j)]);
    let scaled = DMatrix::from_fn(terms.len(), p, |t, j| tau * terms[t].1 * rows[(t, j)]);
    let ys = DVector::from_fn(terms.len(), |t, _| data.y[terms[t].0]);
    let mut q = &prec.beta_prec + rows.tr_mul(&scaled);
    symmetrize_lower(&mut q);
    let b = &prec.beta_shift + scaled.tr_mul(&ys);
    GaussianCanonical::new(q, &b, "kernel coefficient")
}

pub(crate) fn symmetrize_lower(q: &mut DMatrix<f64>) {
    for a in 0..q.nrows() {
        for c in 0..a {
            q[(c, a)] = q[(a, c)];
        }
    }
}

/// Shape and rate of the Gamma full conditional of `σ⁻²` for a component
/// with `n_h` members and residual sum of squares `rss`.
pub fn precision_posterior(config: &ModelConfig, n_h: f64, rss: f64) -> (f64, f64) {
    (config.a_sigma + 0.5 * n_h, config.b_sigma + 0.5 * rss)
}

fn unit_rows(m: &DMatrix<f64>, i: usize, out: &mut [f64]) {
    for (j, v) in out.iter_mut().enumerate() {
        *v = m[(i, j)];
    }
}

/// Step 1: redraws every membership.
pub fn step_allocate(state: &mut GibbsState, data: &Dataset, rng: &RngStream) {
    let h = state.params.h();
    let n = data.n();
    if h == 1 {
        state.g.iter_mut().for_each(|g| *g = 0);
        return;
    }
    let means = data.kernel_means(&state.params);
    let logits = data.logits(&state.params);
    let sigma2 = state.params.sigma2.as_slice();
    state.g = (0..n)
        .into_par_iter()
        .with_min_len(MIN_PARALLEL_UNITS)
        .map_init(
            || (vec![0.0; h - 1], vec![0.0; h], vec![0.0; h]),
            |(eta, mu, probs), i| {
                unit_rows(&logits, i, eta);
                unit_rows(&means, i, mu);
                allocation_probabilities(data.y[i], eta, mu, sigma2, probs);
                let u: f64 = rng.substream(&[purpose::ALLOCATE, i as u64]).random();
                let mut acc = 0.0;
                for (k, &p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return k;
                    }
                }
                // rounding left the cumulative sum just below u
                probs.iter().rposition(|&p| p > 0.0).unwrap_or(h - 1)
            },
        )
        .collect();
}

/// Step 2: redraws augmentations for units at risk, then every stick's coefficients.
pub fn step_update_alpha(
    state: &mut GibbsState,
    data: &Dataset,
    prec: &PriorPrecisions,
    rng: &RngStream,
) -> Result<()> {
    let h = state.params.h();
    if h == 1 {
        return Ok(());
    }
    let n = data.n();
    let logits = data.logits(&state.params);
    let g = &state.g;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .with_min_len(MIN_PARALLEL_UNITS)
        .map(|i| {
            let mut r = rng.substream(&[purpose::POLYA_GAMMA, i as u64]);
            (0..h - 1)
                .map(|k| if g[i] >= k { sample_pg1(logits[(i, k)], &mut r) } else { 0.0 })
                .collect()
        })
        .collect();
    for (i, row) in rows.iter().enumerate() {
        for (k, &w) in row.iter().enumerate() {
            state.omega[(i, k)] = w;
        }
    }
    let omega = &state.omega;
    let new_alpha: Vec<DVector<f64>> = (0..h - 1)
        .into_par_iter()
        .map(|k| {
            let terms: Vec<(usize, f64, f64)> = (0..n)
                .filter(|&i| g[i] >= k)
                .map(|i| (i, omega[(i, k)], if g[i] == k { 0.5 } else { -0.5 }))
                .collect();
            let post = alpha_posterior(&data.psi, &terms, prec)?;
            Ok(post.sample(&mut rng.substream(&[purpose::ALPHA, k as u64])))
        })
        .collect::<Result<_>>()?;
    for (k, a) in new_alpha.iter().enumerate() {
        state.params.alpha.set_row(k, &a.transpose());
    }
    Ok(())
}

/// Steps 3 and 4: kernel coefficients given the current variance, then the
/// variance given the new coefficients, component by component.
pub fn step_update_kernels(
    state: &mut GibbsState,
    data: &Dataset,
    config: &ModelConfig,
    prec: &PriorPrecisions,
    rng: &RngStream,
) -> Result<()> {
    let h = state.params.h();
    let mut members: Vec<Vec<(usize, f64)>> = vec![Vec::new(); h];
    for (i, &k) in state.g.iter().enumerate() {
        members[k].push((i, 1.0));
    }
    let sigma2 = &state.params.sigma2;
    let updated: Vec<(DVector<f64>, f64)> = (0..h)
        .into_par_iter()
        .map(|k| {
            let mut r = rng.substream(&[purpose::KERNEL, k as u64]);
            let post = kernel_posterior(data, &members[k], 1.0 / sigma2[k], prec)?;
            let beta = post.sample(&mut r);
            let rss: f64 = members[k]
                .iter()
                .map(|&(i, _)| (data.y[i] - data.lambda.row(i).dot(&beta.transpose())).powi(2))
                .sum();
            let (shape, rate) = precision_posterior(config, members[k].len() as f64, rss);
            let gamma = Gamma::new(shape, 1.0 / rate)
                .map_err(|e| LsbpError::NumericalFailure(format!("precision draw: {e}")))?;
            let tau: f64 = gamma.sample(&mut r);
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(LsbpError::NumericalFailure(format!(
                    "component {k} precision draw {tau}"
                )));
            }
            Ok((beta, 1.0 / tau))
        })
        .collect::<Result<_>>()?;
    for (k, (b, s2)) in updated.into_iter().enumerate() {
        state.params.beta.set_row(k, &b.transpose());
        state.params.sigma2[k] = s2;
    }
    Ok(())
}

/// One full sweep using the sub-stream of `root` for sweep `t`.
pub fn sweep(
    state: &mut GibbsState,
    data: &Dataset,
    config: &ModelConfig,
    prec: &PriorPrecisions,
    root: &RngStream,
    t: u64,
) -> Result<()> {
    let rng = root.substream(&[purpose::SWEEP, t]);
    step_allocate(state, data, &rng);
    step_update_alpha(state, data, prec, &rng)?;
    step_update_kernels(state, data, config, prec, &rng)
}

pub(crate) fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        b = b.num_threads(t);
    }
    b.build()
        .map_err(|e| LsbpError::Config(format!("thread pool: {e}")))
}

/// Runs a chain from the shared k-means start (or `init`, when given).
pub fn run_chain(
    data: &Dataset,
    config: &ModelConfig,
    settings: &ChainSettings,
    init: Option<GibbsState>,
) -> Result<ChainOutput> {
    settings.validate()?;
    config.validate()?;
    data.require_nonempty()?;
    data.check_against(config)?;
    let prec = config.precisions()?;
    let root = RngStream::new(settings.seed);
    let pool = thread_pool(settings.threads)?;
    let start = Instant::now();
    pool.install(|| {
        let mut state = match init {
            Some(s) => {
                s.params.validate(config)?;
                crate::error::check_dim("memberships", data.n(), s.g.len())?;
                s
            }
            None => {
                let mut r = root.substream(&[purpose::INIT]);
                let (g, params) = initial_params(data, config, &prec, 0.0, &mut r)?;
                GibbsState::new(params, g)
            }
        };
        let mut draws = Vec::with_capacity(settings.retained());
        let mut share = vec![0.0; config.h];
        let mut occupied = 0.0;
        for t in 0..settings.iterations {
            sweep(&mut state, data, config, &prec, &root, t as u64)
                .map_err(|e| e.at_iteration(t))?;
            if t >= settings.burn_in && (t - settings.burn_in + 1) % settings.thin == 0 {
                let counts = state.counts();
                occupied += counts.iter().filter(|&&c| c > 0).count() as f64;
                for (s, c) in share.iter_mut().zip(&counts) {
                    *s += *c as f64 / data.n() as f64;
                }
                draws.push(state.params.clone());
            }
        }
        let m = draws.len().max(1) as f64;
        Ok(ChainOutput {
            diagnostics: ChainDiagnostics {
                mean_occupied: occupied / m,
                mean_share: share.iter().map(|s| s / m).collect(),
            },
            draws,
            settings: *settings,
            elapsed_secs: start.elapsed().as_secs_f64(),
        })
    })
}

/// Pointwise posterior mean and 95% band of the conditional density.
pub fn posterior_density_summary(
    chain: &ChainOutput,
    x_grid: &[f64],
    y_grid: &[f64],
    map: &DesignMap,
) -> Result<DensityGrid> {
    summarize_density(&chain.draws, x_grid, y_grid, map)
}

fn draw_header(h: usize, r: usize, p: usize) -> Vec<String> {
    let mut cols = Vec::new();
    for k in 1..h {
        for j in 1..=r {
            cols.push(format!("alpha_{k}_{j}"));
        }
    }
    for k in 1..=h {
        for j in 1..=p {
            cols.push(format!("beta_{k}_{j}"));
        }
    }
    for k in 1..=h {
        cols.push(format!("sigma2_{k}"));
    }
    cols
}

/// One row per draw with columns `alpha_h_r`, `beta_h_p`, `sigma2_h` (1-based).
pub fn write_draws_csv<W: Write>(draws: &[MixtureParams], r: usize, w: W) -> Result<()> {
    let first = draws
        .first()
        .ok_or_else(|| LsbpError::InvalidArgument("no draws to write".into()))?;
    let (h, p) = (first.h(), first.beta.ncols());
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(draw_header(h, r, p))?;
    for d in draws {
        let mut rec: Vec<f64> = Vec::with_capacity((h - 1) * r + h * p + h);
        for k in 0..h - 1 {
            rec.extend(d.alpha.row(k).iter());
        }
        for k in 0..h {
            rec.extend(d.beta.row(k).iter());
        }
        rec.extend(d.sigma2.iter());
        wr.serialize(rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// Inverse of [`write_draws_csv`]; dimensions are read from the header.
pub fn read_draws_csv<R: Read>(rd: R) -> Result<Vec<MixtureParams>> {
    let mut reader = csv::Reader::from_reader(rd);
    let header = reader.headers()?.clone();
    let count = |prefix: &str| header.iter().filter(|c| c.starts_with(prefix)).count();
    let h = count("sigma2_");
    if h == 0 {
        return Err(LsbpError::Ingestion {
            row: 0,
            message: "no sigma2 columns".into(),
        });
    }
    let p = count("beta_") / h;
    let r = if h > 1 { count("alpha_") / (h - 1) } else { 0 };
    let expected = draw_header(h, r, p);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(LsbpError::Ingestion {
            row: 0,
            message: "unexpected parameter columns".into(),
        });
    }
    let mut out = Vec::new();
    for (row, rec) in reader.deserialize::<Vec<f64>>().enumerate() {
        let v = rec.map_err(|e| LsbpError::Ingestion {
            row: row + 1,
            message: e.to_string(),
        })?;
        let na = (h - 1) * r;
        let nb = h * p;
        out.push(MixtureParams {
            alpha: DMatrix::from_row_slice(h - 1, r, &v[..na]),
            beta: DMatrix::from_row_slice(h, p, &v[na..na + nb]),
            sigma2: DVector::from_row_slice(&v[na + nb..]),
        });
    }
    Ok(out)
}
