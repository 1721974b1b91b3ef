//! Design-matrix construction: standardization, the natural cubic spline
//! basis for the stick-breaking log-odds, and the linear kernel design.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LsbpError, Result};

/// Affine map `v ↦ (v - center) / scale` for one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardizationRecord {
    pub center: f64,
    pub scale: f64,
}

impl StandardizationRecord {
    pub fn identity() -> Self {
        StandardizationRecord {
            center: 0.0,
            scale: 1.0,
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.center) / self.scale
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.scale + self.center
    }
}

/// Centers to mean zero and scales to unit sample standard deviation (n − 1 denominator).
pub fn standardize(x: &[f64]) -> Result<(Vec<f64>, StandardizationRecord)> {
    if x.len() < 2 {
        return Err(LsbpError::InvalidArgument(format!(
            "standardization needs at least 2 values, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let ss = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let sd = (ss / (n - 1.0)).sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(LsbpError::DegenerateColumn(
            "column is constant or non-finite".into(),
        ));
    }
    let rec = StandardizationRecord {
        center: mean,
        scale: sd,
    };
    Ok((x.iter().map(|&v| rec.apply(v)).collect(), rec))
}

/// Knots of a natural cubic spline with `num_basis` non-intercept columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub num_basis: usize,
    pub interior_knots: Vec<f64>,
    pub boundary_knots: (f64, f64),
}

impl SplineSpec {
    /// Interior knots at equally spaced quantiles, boundary knots at min/max.
    pub fn from_quantiles(x: &[f64], num_basis: usize) -> Result<Self> {
        if x.is_empty() {
            return Err(LsbpError::InvalidArgument("empty predictor".into()));
        }
        if num_basis == 0 {
            return Err(LsbpError::InvalidArgument("num_basis must be ≥ 1".into()));
        }
        let mut sorted = x.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let interior = (1..num_basis)
            .map(|j| quantile_sorted(&sorted, j as f64 / num_basis as f64))
            .collect();
        let spec = SplineSpec {
            num_basis,
            interior_knots: interior,
            boundary_knots: (sorted[0], sorted[sorted.len() - 1]),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.boundary_knots;
        if self.num_basis == 0 {
            return Err(LsbpError::InvalidArgument("num_basis must be ≥ 1".into()));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(LsbpError::InvalidArgument(format!(
                "boundary knots ({lo}, {hi}) must be finite and increasing"
            )));
        }
        if self.interior_knots.len() + 1 != self.num_basis {
            return Err(LsbpError::InvalidArgument(format!(
                "{} basis columns need {} interior knots, got {}",
                self.num_basis,
                self.num_basis - 1,
                self.interior_knots.len()
            )));
        }
        let mut prev = lo;
        for &k in &self.interior_knots {
            if !(k > prev) {
                return Err(LsbpError::InvalidArgument(
                    "knots must be strictly increasing and inside the boundary".into(),
                ));
            }
            prev = k;
        }
        if !(hi > prev) {
            return Err(LsbpError::InvalidArgument(
                "interior knots must lie strictly inside the boundary".into(),
            ));
        }
        Ok(())
    }

    fn knots(&self) -> Vec<f64> {
        let mut k = Vec::with_capacity(self.num_basis + 1);
        k.push(self.boundary_knots.0);
        k.extend_from_slice(&self.interior_knots);
        k.push(self.boundary_knots.1);
        k
    }
}

/// Type-7 quantile of an already sorted slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Precomputed cardinal natural cubic splines on a knot set.
///
/// Column `k` interpolates the k-th unit vector at the knots with zero second
/// derivative at both boundary knots. The cardinal functions sum to one, so
/// dropping the first one and adding an intercept keeps the full span.
#[derive(Debug, Clone)]
pub struct NaturalSplineBasis {
    knots: Vec<f64>,
    /// `second[(j, k)]`: second derivative at knot `j` of cardinal function `k`.
    second: DMatrix<f64>,
}

impl NaturalSplineBasis {
    pub fn new(spec: &SplineSpec) -> Result<Self> {
        spec.validate()?;
        let knots = spec.knots();
        let m = knots.len();
        let mut second = DMatrix::zeros(m, m);
        if m > 2 {
            let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
            let inner = m - 2;
            let mut a = DMatrix::zeros(inner, inner);
            for r in 0..inner {
                let j = r + 1;
                a[(r, r)] = 2.0 * (h[j - 1] + h[j]);
                if r > 0 {
                    a[(r, r - 1)] = h[j - 1];
                }
                if r + 1 < inner {
                    a[(r, r + 1)] = h[j];
                }
            }
            // right-hand side for every unit vector at once
            let mut rhs = DMatrix::zeros(inner, m);
            for r in 0..inner {
                let j = r + 1;
                rhs[(r, j + 1)] += 6.0 / h[j];
                rhs[(r, j)] -= 6.0 / h[j] + 6.0 / h[j - 1];
                rhs[(r, j - 1)] += 6.0 / h[j - 1];
            }
            let sol = a.lu().solve(&rhs).ok_or_else(|| {
                LsbpError::NumericalFailure("spline system is singular".into())
            })?;
            second.view_mut((1, 0), (inner, m)).copy_from(&sol);
        }
        Ok(NaturalSplineBasis { knots, second })
    }

    pub fn num_functions(&self) -> usize {
        self.knots.len()
    }

    /// Value of cardinal function `k` at `x` (linear beyond the boundary).
    pub fn eval(&self, k: usize, x: f64) -> f64 {
        let t = &self.knots;
        let m = t.len();
        let v = |j: usize| if j == k { 1.0 } else { 0.0 };
        let s2 = |j: usize| self.second[(j, k)];
        if x < t[0] {
            let h = t[1] - t[0];
            let slope = (v(1) - v(0)) / h - h * (2.0 * s2(0) + s2(1)) / 6.0;
            return v(0) + slope * (x - t[0]);
        }
        if x > t[m - 1] {
            let h = t[m - 1] - t[m - 2];
            let slope = (v(m - 1) - v(m - 2)) / h + h * (s2(m - 2) + 2.0 * s2(m - 1)) / 6.0;
            return v(m - 1) + slope * (x - t[m - 1]);
        }
        let j = match t.partition_point(|&knot| knot <= x) {
            0 => 0,
            p if p >= m => m - 2,
            p => p - 1,
        };
        let h = t[j + 1] - t[j];
        let a = (t[j + 1] - x) / h;
        let b = (x - t[j]) / h;
        a * v(j) + b * v(j + 1) + ((a * a * a - a) * s2(j) + (b * b * b - b) * s2(j + 1)) * h * h / 6.0
    }

    /// Intercept followed by cardinal functions `1..M`.
    pub fn row(&self, x: f64) -> Vec<f64> {
        let mut r = Vec::with_capacity(self.num_functions());
        r.push(1.0);
        for k in 1..self.num_functions() {
            r.push(self.eval(k, x));
        }
        r
    }
}

/// `n × (K + 1)` design: intercept then `K` natural cubic spline columns.
pub fn spline_basis(x: &[f64], spec: &SplineSpec) -> Result<DMatrix<f64>> {
    let basis = NaturalSplineBasis::new(spec)?;
    let cols = spec.num_basis + 1;
    let mut out = DMatrix::zeros(x.len(), cols);
    for (i, &xi) in x.iter().enumerate() {
        if !xi.is_finite() {
            return Err(LsbpError::InvalidArgument(format!(
                "non-finite predictor at index {i}"
            )));
        }
        for (c, v) in basis.row(xi).into_iter().enumerate() {
            out[(i, c)] = v;
        }
    }
    Ok(out)
}

/// Columns `(1, x)`.
pub fn linear_kernel_design(x: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), 2, |i, j| if j == 0 { 1.0 } else { x[i] })
}

/// How the log-odds design is built from the (standardized) predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogitBasis {
    /// `ψ(x) = (1, x)`.
    Linear,
    Spline(SplineSpec),
}

/// Maps a raw scalar predictor to design rows and the response to model units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMap {
    pub x_record: StandardizationRecord,
    pub y_record: StandardizationRecord,
    pub logit_basis: LogitBasis,
}

impl DesignMap {
    pub fn identity_linear() -> Self {
        DesignMap {
            x_record: StandardizationRecord::identity(),
            y_record: StandardizationRecord::identity(),
            logit_basis: LogitBasis::Linear,
        }
    }

    pub fn kernel_dim(&self) -> usize {
        2
    }

    pub fn logit_dim(&self) -> usize {
        match &self.logit_basis {
            LogitBasis::Linear => 2,
            LogitBasis::Spline(s) => s.num_basis + 1,
        }
    }

    /// Builds `(Λ, Ψ)` for raw predictor values.
    pub fn designs(&self, x_raw: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let xs: Vec<f64> = x_raw.iter().map(|&v| self.x_record.apply(v)).collect();
        let lambda = linear_kernel_design(&xs);
        let psi = match &self.logit_basis {
            LogitBasis::Linear => linear_kernel_design(&xs),
            LogitBasis::Spline(spec) => spline_basis(&xs, spec)?,
        };
        Ok((lambda, psi))
    }

    /// Design rows `(λ(x), ψ(x))` for one raw predictor value.
    pub fn rows(&self, x_raw: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let (l, p) = self.designs(&[x_raw])?;
        Ok((l.row(0).transpose(), p.row(0).transpose()))
    }

    pub fn y_to_model(&self, y: f64) -> f64 {
        self.y_record.apply(y)
    }

    pub fn y_from_model(&self, y: f64) -> f64 {
        self.y_record.invert(y)
    }

    /// Multiplier turning a model-scale density into an original-scale one.
    pub fn density_jacobian(&self) -> f64 {
        1.0 / self.y_record.scale
    }
}
