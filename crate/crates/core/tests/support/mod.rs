//! Independent reference implementations shared by the integration tests
//! and the acceptance harness. Nothing here calls the library's own
//! numerical routines for the quantity being checked.

#![allow(dead_code)]

use std::f64::consts::PI;

use lsbp::gibbs::{sweep, GibbsState};
use lsbp::model::{Dataset, MixtureParams, ModelConfig};
use lsbp::rng::RngStream;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};

pub fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

pub fn normal_pdf(y: f64, mean: f64, var: f64) -> f64 {
    (-(y - mean) * (y - mean) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

/// Stick weights by the direct product formula, no log space.
pub fn naive_weights(psi_row: &[f64], alpha: &DMatrix<f64>) -> Vec<f64> {
    let h = alpha.nrows() + 1;
    let mut pi = Vec::with_capacity(h);
    let mut rest = 1.0;
    for k in 0..h {
        let nu = if k + 1 < h {
            logistic((0..psi_row.len()).map(|j| psi_row[j] * alpha[(k, j)]).sum())
        } else {
            1.0
        };
        pi.push(nu * rest);
        rest *= 1.0 - nu;
    }
    pi
}

fn kernel_mean(lambda_row: &[f64], p: &MixtureParams, k: usize) -> f64 {
    (0..lambda_row.len()).map(|j| lambda_row[j] * p.beta[(k, j)]).sum()
}

pub fn naive_density(y: f64, lambda_row: &[f64], psi_row: &[f64], p: &MixtureParams) -> f64 {
    naive_weights(psi_row, &p.alpha)
        .iter()
        .enumerate()
        .map(|(k, w)| w * normal_pdf(y, kernel_mean(lambda_row, p, k), p.sigma2[k]))
        .sum()
}

/// Membership probabilities as plain ratios of weighted kernel densities.
pub fn naive_allocation(y: f64, lambda_row: &[f64], psi_row: &[f64], p: &MixtureParams) -> Vec<f64> {
    let terms: Vec<f64> = naive_weights(psi_row, &p.alpha)
        .iter()
        .enumerate()
        .map(|(k, w)| w * normal_pdf(y, kernel_mean(lambda_row, p, k), p.sigma2[k]))
        .collect();
    let total: f64 = terms.iter().sum();
    terms.iter().map(|t| t / total).collect()
}

pub fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Gauss–Hermite rule for `∫ e^{−x²} f(x) dx` by Golub–Welsch.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], PI.sqrt() * eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// `E f(Z)` for `Z ~ N(mean, sd²)` by 64-node Gauss–Hermite.
pub fn gh_normal_expectation(mean: f64, sd: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (x, w) = gauss_hermite(64);
    x.iter()
        .zip(&w)
        .map(|(&xk, &wk)| wk * f(mean + std::f64::consts::SQRT_2 * sd * xk))
        .sum::<f64>()
        / PI.sqrt()
}

/// `E ω` for `ω ~ PG(1, c)`, written out independently of the library.
pub fn pg_exact_mean(c: f64) -> f64 {
    if c == 0.0 {
        0.25
    } else {
        (c / 2.0).tanh() / (2.0 * c)
    }
}

pub const PG_SERIES_TERMS: usize = 200;

fn pg_series_denominators(c: f64) -> Vec<f64> {
    let shift = c * c / (4.0 * PI * PI);
    (1..=PG_SERIES_TERMS)
        .map(|k| {
            let a = k as f64 - 0.5;
            a * a + shift
        })
        .collect()
}

/// Mean of the omitted series terms, added back to every truncated draw.
pub fn pg_series_tail(c: f64) -> f64 {
    let kept: f64 = pg_series_denominators(c).iter().map(|d| 1.0 / d).sum::<f64>() / (2.0 * PI * PI);
    pg_exact_mean(c) - kept
}

/// `ω = (2π²)⁻¹ Σ_k g_k / {(k − ½)² + c²/(4π²)}`, `g_k ~ Ga(1, 1)`, cut at
/// 200 terms plus the tail mean.
pub fn pg_series_draws<R: Rng + ?Sized>(c: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let den = pg_series_denominators(c);
    let tail = pg_series_tail(c);
    (0..n)
        .map(|_| {
            let s: f64 = den.iter().map(|d| rng.sample::<f64, _>(Exp1) / d).sum();
            s / (2.0 * PI * PI) + tail
        })
        .collect()
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    let mut q = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        q += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (d, q.clamp(0.0, 1.0))
}

pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Mean and batch-means standard error for an autocorrelated series.
pub fn batch_means(v: &[f64], batches: usize) -> (f64, f64) {
    let size = v.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| v[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    mean_and_se(&means)
}

// ---------------------------------------------------------------------------
// Geweke joint-distribution test

pub struct GewekeSetup {
    pub config: ModelConfig,
    pub lambda: DMatrix<f64>,
    pub psi: DMatrix<f64>,
}

/// `n = 5`, `H = 2`, `P = 1`, `R = 2`; the Gamma prior has shape 3 so
/// every monitored moment is finite.
pub fn geweke_setup() -> GewekeSetup {
    let x = [-1.0, -0.5, 0.0, 0.5, 1.0];
    GewekeSetup {
        config: ModelConfig::new(
            2,
            DVector::from_element(1, 0.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_vec(vec![0.0, 0.0]),
            DMatrix::identity(2, 2),
            3.0,
            2.0,
        )
        .unwrap(),
        lambda: DMatrix::from_element(5, 1, 1.0),
        psi: DMatrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { x[i] }),
    }
}

fn draw_prior<R: Rng + ?Sized>(c: &ModelConfig, rng: &mut R) -> MixtureParams {
    let gamma = Gamma::new(c.a_sigma, 1.0 / c.b_sigma).unwrap();
    let chol_a = c.sigma_alpha.clone().cholesky().unwrap().l();
    let chol_b = c.sigma_beta.clone().cholesky().unwrap().l();
    let std = |rng: &mut R, k: usize| DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut alpha = DMatrix::zeros(c.h - 1, c.mu_alpha.len());
    for k in 0..c.h - 1 {
        let a = &c.mu_alpha + &chol_a * std(rng, c.mu_alpha.len());
        alpha.set_row(k, &a.transpose());
    }
    let mut beta = DMatrix::zeros(c.h, c.mu_beta.len());
    let mut sigma2 = DVector::zeros(c.h);
    for k in 0..c.h {
        let b = &c.mu_beta + &chol_b * std(rng, c.mu_beta.len());
        beta.set_row(k, &b.transpose());
        sigma2[k] = 1.0 / gamma.sample(rng);
    }
    MixtureParams { alpha, beta, sigma2 }
}

fn draw_data<R: Rng + ?Sized>(s: &GewekeSetup, p: &MixtureParams, rng: &mut R) -> (DVector<f64>, Vec<usize>) {
    let n = s.lambda.nrows();
    let mut y = DVector::zeros(n);
    let mut g = vec![0; n];
    for i in 0..n {
        let w = naive_weights(&row(&s.psi, i), &p.alpha);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = w.len() - 1;
        for (j, wj) in w.iter().enumerate() {
            acc += wj;
            if u < acc {
                k = j;
                break;
            }
        }
        g[i] = k;
        let mean = kernel_mean(&row(&s.lambda, i), p, k);
        y[i] = mean + p.sigma2[k].sqrt() * rng.sample::<f64, _>(StandardNormal);
    }
    (y, g)
}

pub const GEWEKE_NAMES: [&str; 9] = [
    "alpha_1_1", "alpha_1_2", "beta_1", "beta_2", "tau_1", "tau_2", "alpha_1_1^2", "beta_1^2", "tau_1^2",
];

fn monitored(p: &MixtureParams) -> [f64; 9] {
    let (t1, t2) = (1.0 / p.sigma2[0], 1.0 / p.sigma2[1]);
    [
        p.alpha[(0, 0)],
        p.alpha[(0, 1)],
        p.beta[(0, 0)],
        p.beta[(1, 0)],
        t1,
        t2,
        p.alpha[(0, 0)].powi(2),
        p.beta[(0, 0)].powi(2),
        t1 * t1,
    ]
}

#[derive(Debug)]
pub struct GewekeRow {
    pub name: &'static str,
    pub marginal: (f64, f64),
    pub successive: (f64, f64),
    pub z: f64,
}

/// Marginal-conditional draws from prior and model versus a chain that
/// alternates a fresh data draw given the parameters with one Gibbs sweep.
pub fn geweke(sweeps: usize, seed: u64) -> Vec<GewekeRow> {
    let s = geweke_setup();
    let prec = s.config.precisions().unwrap();
    let root = RngStream::new(seed);

    let mut rng = root.substream(&[1]);
    let mc: Vec<[f64; 9]> = (0..sweeps).map(|_| monitored(&draw_prior(&s.config, &mut rng))).collect();

    let mut rng = root.substream(&[2]);
    let chain_root = root.substream(&[3]);
    let params = draw_prior(&s.config, &mut rng);
    let (y, g) = draw_data(&s, &params, &mut rng);
    let mut state = GibbsState::new(params, g);
    let mut data = Dataset::new(y, s.lambda.clone(), s.psi.clone()).unwrap();
    let mut sc: Vec<[f64; 9]> = Vec::with_capacity(sweeps);
    for t in 0..sweeps {
        sweep(&mut state, &data, &s.config, &prec, &chain_root, t as u64).unwrap();
        sc.push(monitored(&state.params));
        let (y, g) = draw_data(&s, &state.params, &mut rng);
        data.y = y;
        state.g = g;
    }

    (0..GEWEKE_NAMES.len())
        .map(|j| {
            let a: Vec<f64> = mc.iter().map(|v| v[j]).collect();
            let b: Vec<f64> = sc.iter().map(|v| v[j]).collect();
            let marginal = mean_and_se(&a);
            let successive = batch_means(&b, 200);
            let z = (marginal.0 - successive.0) / (marginal.1.powi(2) + successive.1.powi(2)).sqrt();
            GewekeRow {
                name: GEWEKE_NAMES[j],
                marginal,
                successive,
                z,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Random instances

/// `n` units with `x ~ U(−2, 2)`, linear designs, and responses drawn from
/// a random `h_true`-component truth.
pub fn random_instance(n: usize, h_true: usize, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let alpha = DMatrix::from_fn(h_true - 1, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let beta = DMatrix::from_fn(h_true, 2, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
    let sigma2: Vec<f64> = (0..h_true).map(|_| rng.random_range(0.1..1.0)).collect();
    let truth = MixtureParams {
        alpha,
        beta,
        sigma2: DVector::from_vec(sigma2),
    };
    let lambda = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
    let s = GewekeSetup {
        config: ModelConfig::standard(h_true, 2, 2, 1.0, 1.0).unwrap(),
        lambda: lambda.clone(),
        psi: lambda.clone(),
    };
    let (y, _) = draw_data(&s, &truth, &mut rng);
    Dataset::new(y, lambda.clone(), lambda).unwrap()
}

pub fn random_params(h: usize, p: usize, r: usize, rng: &mut RngStream) -> MixtureParams {
    MixtureParams {
        alpha: DMatrix::from_fn(h - 1, r, |_, _| rng.sample::<f64, _>(StandardNormal)),
        beta: DMatrix::from_fn(h, p, |_, _| rng.sample::<f64, _>(StandardNormal)),
        sigma2: DVector::from_fn(h, |_, _| rng.random_range(0.2..2.0)),
    }
}
