//! Ground-truth generator for logit stick-breaking mixtures with a scalar
//! predictor. True weights and kernels use `ψ(x) = λ(x) = (1, x)` on the raw
//! predictor scale.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_dataset, BasisOptions};
use crate::error::{LsbpError, Result};
use crate::model::{weights_from_logits, Dataset, MixtureParams};
use crate::rng::{purpose, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorDist {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    /// `(H−1) × 2` stick coefficients on `(1, x)`.
    pub alpha: Vec<Vec<f64>>,
    /// `H × 2` kernel coefficients on `(1, x)`.
    pub beta: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    pub predictor: PredictorDist,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// 1-based component labels.
    pub labels: Vec<usize>,
    pub truth: MixtureParams,
}

impl SyntheticSample {
    pub fn dataset(&self, opts: &BasisOptions) -> Result<Dataset> {
        build_dataset(&self.x, &self.y, opts)
    }
}

impl SyntheticSpec {
    pub fn components(&self) -> usize {
        self.beta.len()
    }

    /// Two-component replica: a dominant narrow component and a
    /// left-shifted, wider component whose weight grows with the predictor.
    pub fn replica(n: usize, seed: u64) -> Self {
        SyntheticSpec {
            n,
            alpha: vec![vec![2.0, -0.03]],
            beta: vec![vec![280.0, -0.03], vec![252.0, -0.08]],
            sigma2: vec![100.0, 400.0],
            predictor: PredictorDist::Uniform { lo: 0.0, hi: 150.0 },
            seed,
        }
    }

    /// Two equally weighted components six standard deviations apart.
    pub fn well_separated(n: usize, seed: u64) -> Self {
        SyntheticSpec {
            n,
            alpha: vec![vec![0.0, 0.0]],
            beta: vec![vec![-3.0, 0.5], vec![3.0, -0.5]],
            sigma2: vec![0.25, 0.25],
            predictor: PredictorDist::Uniform { lo: -1.0, hi: 1.0 },
            seed,
        }
    }

    pub fn preset(name: &str, n: Option<usize>, seed: u64) -> Result<Self> {
        match name {
            "replica" => Ok(Self::replica(n.unwrap_or(2312), seed)),
            "separated" => Ok(Self::well_separated(n.unwrap_or(500), seed)),
            other => Err(LsbpError::Config(format!(
                "unknown synthetic preset '{other}' (expected replica or separated)"
            ))),
        }
    }

    pub fn truth(&self) -> Result<MixtureParams> {
        let h = self.beta.len();
        if h == 0 {
            return Err(LsbpError::InvalidArgument("at least one component required".into()));
        }
        if self.alpha.len() + 1 != h || self.sigma2.len() != h {
            return Err(LsbpError::InvalidArgument(format!(
                "{h} components need {} alpha rows and {h} variances",
                h - 1
            )));
        }
        let rows_ok = |m: &Vec<Vec<f64>>| m.iter().all(|r| r.len() == 2);
        if !rows_ok(&self.alpha) || !rows_ok(&self.beta) {
            return Err(LsbpError::InvalidArgument(
                "coefficient rows must have 2 entries (intercept, slope)".into(),
            ));
        }
        let flat = |m: &Vec<Vec<f64>>| m.iter().flatten().copied().collect::<Vec<_>>();
        let p = MixtureParams {
            alpha: DMatrix::from_row_slice(h - 1, 2, &flat(&self.alpha)),
            beta: DMatrix::from_row_slice(h, 2, &flat(&self.beta)),
            sigma2: DVector::from_vec(self.sigma2.clone()),
        };
        if p.sigma2.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(LsbpError::InvalidArgument("variances must be positive".into()));
        }
        match self.predictor {
            PredictorDist::Uniform { lo, hi } if !(lo < hi) => {
                return Err(LsbpError::InvalidArgument("uniform predictor needs lo < hi".into()))
            }
            PredictorDist::Normal { sd, .. } if !(sd > 0.0) => {
                return Err(LsbpError::InvalidArgument("normal predictor needs sd > 0".into()))
            }
            _ => {}
        }
        Ok(p)
    }
}

fn draw_x<R: Rng + ?Sized>(dist: &PredictorDist, rng: &mut R) -> f64 {
    match *dist {
        PredictorDist::Uniform { lo, hi } => Uniform::new(lo, hi).expect("checked").sample(rng),
        PredictorDist::Normal { mean, sd } => Normal::new(mean, sd).expect("checked").sample(rng),
    }
}

/// Draws `x_i`, then `G_i` from the stick-breaking weights at `x_i`, then
/// `y_i ~ N(λ(x_i)ᵀβ_G, σ²_G)`. Unit `i` uses its own sub-stream.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSample> {
    let truth = spec.truth()?;
    let root = RngStream::new(spec.seed);
    let h = truth.h();
    let units: Vec<(f64, f64, usize)> = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let mut r = root.substream(&[purpose::DATA, i as u64]);
            let x = draw_x(&spec.predictor, &mut r);
            let logits: Vec<f64> = (0..h - 1)
                .map(|k| truth.alpha[(k, 0)] + truth.alpha[(k, 1)] * x)
                .collect();
            let w = weights_from_logits(&logits);
            let u: f64 = r.random();
            let mut acc = 0.0;
            let mut g = h - 1;
            for (k, p) in w.pi.iter().enumerate() {
                acc += p;
                if u < acc {
                    g = k;
                    break;
                }
            }
            let mean = truth.beta[(g, 0)] + truth.beta[(g, 1)] * x;
            let z: f64 = r.sample(StandardNormal);
            (x, mean + truth.sigma2[g].sqrt() * z, g + 1)
        })
        .collect();
    let mut s = SyntheticSample {
        x: Vec::with_capacity(spec.n),
        y: Vec::with_capacity(spec.n),
        labels: Vec::with_capacity(spec.n),
        truth,
    };
    for (x, y, g) in units {
        s.x.push(x);
        s.y.push(y);
        s.labels.push(g);
    }
    Ok(s)
}
