//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{LsbpError, Result};

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if !m.is_square() {
        return Err(LsbpError::InvalidArgument(format!("{what} is not square")));
    }
    m.clone()
        .cholesky()
        .ok_or_else(|| LsbpError::NumericalFailure(format!("{what} is not positive definite")))
}

pub fn is_spd(m: &DMatrix<f64>) -> bool {
    if !m.is_square() || m.nrows() == 0 {
        return false;
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return false;
            }
        }
    }
    m.clone().cholesky().is_some()
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(cholesky(m, what)?.inverse())
}

/// `ln det` from a Cholesky factor.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Gaussian with precision `q` and linear term `b`: mean `q⁻¹ b`, covariance `q⁻¹`.
pub struct GaussianCanonical {
    pub chol: Cholesky<f64, Dyn>,
    pub mean: DVector<f64>,
}

impl GaussianCanonical {
    pub fn new(precision: DMatrix<f64>, linear: &DVector<f64>, what: &str) -> Result<Self> {
        let chol = precision
            .cholesky()
            .ok_or_else(|| LsbpError::NumericalFailure(format!("{what} precision is not SPD")))?;
        let mean = chol.solve(linear);
        Ok(GaussianCanonical { chol, mean })
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `mean + L⁻ᵀ z` with `z ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.mean.len();
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lt = self.chol.l().transpose();
        let x = lt
            .solve_upper_triangular(&z)
            .expect("Cholesky factor has a positive diagonal");
        &self.mean + x
    }
}

/// Draws from `N(mean, cov)` given a Cholesky factor of `cov`.
pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    chol_cov: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mean + chol_cov * z
}

/// `-½ (x − mean)ᵀ Q (x − mean)`: the Gaussian log kernel without its constant.
pub fn log_mvn_kernel(x: &DVector<f64>, mean: &DVector<f64>, precision: &DMatrix<f64>) -> f64 {
    let d = x - mean;
    -0.5 * d.dot(&(precision * &d))
}

/// KL( N(m1, s1) ‖ N(m0, s0) ) given the prior precision and its log-determinant.
pub fn kl_gaussian(
    m1: &DVector<f64>,
    s1: &DMatrix<f64>,
    m0: &DVector<f64>,
    prec0: &DMatrix<f64>,
    logdet_s0: f64,
) -> Result<f64> {
    let k = m1.len() as f64;
    let chol1 = cholesky(s1, "variational covariance")?;
    let d = m1 - m0;
    let trace = (prec0 * s1).trace();
    let quad = d.dot(&(prec0 * &d));
    Ok(0.5 * (trace + quad - k + logdet_s0 - log_det(&chol1)))
}
