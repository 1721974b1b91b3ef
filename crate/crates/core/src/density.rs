//! Pointwise summaries of conditional densities and CDFs across a set of
//! parameter draws (posterior draws, variational draws, or a single point
//! estimate), reported on the original data scale.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::basis::DesignMap;
use crate::error::{LsbpError, Result};
use crate::model::{component_log_terms, MixtureParams};
use crate::special::{log_sum_exp, norm_cdf};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridCell {
    pub x: f64,
    pub y: f64,
    pub mean: f64,
    pub lo95: f64,
    pub hi95: f64,
}

/// Density estimate on an `x × y` grid; `cells` is x-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub cells: Vec<GridCell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CdfPoint {
    pub x: f64,
    pub y_star: f64,
    pub mean: f64,
    pub lo95: f64,
    pub hi95: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdfCurves {
    pub points: Vec<CdfPoint>,
}

/// `n` equally spaced points spanning `values`, padded by `pad` times the range on each side.
pub fn padded_grid(values: &[f64], n: usize, pad: f64) -> Result<Vec<f64>> {
    if values.is_empty() || n < 2 {
        return Err(LsbpError::InvalidArgument(
            "grid needs data and at least two points".into(),
        ));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { hi - lo } else { 1.0 };
    let (a, b) = (lo - pad * width, hi + pad * width);
    Ok((0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect())
}

/// Type-7 quantile of unsorted data; reorders `v`.
pub fn quantile_unsorted(v: &mut [f64], p: f64) -> f64 {
    let n = v.len();
    if n == 1 {
        return v[0];
    }
    let pos = p * (n - 1) as f64;
    let k = pos.floor() as usize;
    let frac = pos - k as f64;
    let (_, lo, upper) = v.select_nth_unstable_by(k, f64::total_cmp);
    let lo = *lo;
    if frac == 0.0 || upper.is_empty() {
        return lo;
    }
    let hi = upper.iter().copied().fold(f64::INFINITY, f64::min);
    lo + frac * (hi - lo)
}

fn band(values: &mut [f64]) -> (f64, f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let lo = quantile_unsorted(values, 0.025);
    let hi = quantile_unsorted(values, 0.975);
    (mean, lo, hi)
}

/// Per-draw stick log-odds and kernel means at one design point.
struct DrawAtX {
    logits: Vec<f64>,
    means: Vec<f64>,
}

fn draws_at_x(draws: &[MixtureParams], lambda: &[f64], psi: &[f64]) -> Vec<DrawAtX> {
    draws
        .iter()
        .map(|p| DrawAtX {
            logits: (0..p.alpha.nrows())
                .map(|h| (0..psi.len()).map(|j| p.alpha[(h, j)] * psi[j]).sum())
                .collect(),
            means: (0..p.beta.nrows())
                .map(|h| (0..lambda.len()).map(|j| p.beta[(h, j)] * lambda[j]).sum())
                .collect(),
        })
        .collect()
}

fn check_inputs(draws: &[MixtureParams], x: &[f64], y: &[f64], map: &DesignMap) -> Result<()> {
    if draws.is_empty() {
        return Err(LsbpError::InvalidArgument("no parameter draws".into()));
    }
    if x.is_empty() || y.is_empty() {
        return Err(LsbpError::InvalidArgument("empty evaluation grid".into()));
    }
    if let Some(bad) = x.iter().chain(y).find(|v| !v.is_finite()) {
        return Err(LsbpError::InvalidArgument(format!("non-finite grid value {bad}")));
    }
    let first = &draws[0];
    crate::error::check_dim("kernel design", map.kernel_dim(), first.beta.ncols())?;
    crate::error::check_dim("logit design", map.logit_dim(), first.alpha.ncols())
}

/// Pointwise mean and 2.5%/97.5% quantiles of `f_x(y)` across draws; `x`
/// and `y` are on the original scale and densities carry the Jacobian.
pub fn summarize_density(
    draws: &[MixtureParams],
    x: &[f64],
    y: &[f64],
    map: &DesignMap,
) -> Result<DensityGrid> {
    check_inputs(draws, x, y, map)?;
    let jac = map.density_jacobian();
    let y_model: Vec<f64> = y.iter().map(|&v| map.y_to_model(v)).collect();
    let per_x: Vec<Vec<GridCell>> = x
        .par_iter()
        .map(|&xv| -> Result<Vec<GridCell>> {
            let (l, p) = map.rows(xv)?;
            let at = draws_at_x(draws, l.as_slice(), p.as_slice());
            let h = draws[0].h();
            let mut terms = vec![0.0; h];
            let mut values = vec![0.0; draws.len()];
            let mut out = Vec::with_capacity(y.len());
            for (k, &ym) in y_model.iter().enumerate() {
                for (d, (draw, a)) in draws.iter().zip(&at).enumerate() {
                    component_log_terms(ym, &a.logits, &a.means, draw.sigma2.as_slice(), &mut terms);
                    values[d] = log_sum_exp(&terms).exp() * jac;
                }
                let (mean, lo95, hi95) = band(&mut values);
                out.push(GridCell { x: xv, y: y[k], mean, lo95, hi95 });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(DensityGrid {
        x: x.to_vec(),
        y: y.to_vec(),
        cells: per_x.into_iter().flatten().collect(),
    })
}

/// Pointwise summaries of `pr(y < y* | x)` across draws.
pub fn summarize_cdf(
    draws: &[MixtureParams],
    x: &[f64],
    y_star: &[f64],
    map: &DesignMap,
) -> Result<CdfCurves> {
    check_inputs(draws, x, y_star, map)?;
    let per_x: Vec<Vec<CdfPoint>> = x
        .par_iter()
        .map(|&xv| -> Result<Vec<CdfPoint>> {
            let (l, p) = map.rows(xv)?;
            let at = draws_at_x(draws, l.as_slice(), p.as_slice());
            let mut values = vec![0.0; draws.len()];
            let mut out = Vec::with_capacity(y_star.len());
            for &ys in y_star {
                let ym = map.y_to_model(ys);
                for (d, (draw, a)) in draws.iter().zip(&at).enumerate() {
                    let w = crate::model::weights_from_logits(&a.logits);
                    values[d] = w
                        .pi
                        .iter()
                        .zip(&a.means)
                        .zip(draw.sigma2.iter())
                        .map(|((pi, m), s2)| pi * norm_cdf((ym - m) / s2.sqrt()))
                        .sum::<f64>()
                        .clamp(0.0, 1.0);
                }
                let (mean, lo95, hi95) = band(&mut values);
                out.push(CdfPoint { x: xv, y_star: ys, mean, lo95, hi95 });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(CdfCurves {
        points: per_x.into_iter().flatten().collect(),
    })
}

impl DensityGrid {
    /// Cells for the `i`-th x value, in y order.
    pub fn slice(&self, i: usize) -> &[GridCell] {
        let ny = self.y.len();
        &self.cells[i * ny..(i + 1) * ny]
    }

    /// Trapezoid integral of the pointwise mean density over y for each x.
    pub fn slice_integrals(&self) -> Vec<f64> {
        (0..self.x.len())
            .map(|i| {
                let s = self.slice(i);
                s.windows(2)
                    .map(|w| 0.5 * (w[0].mean + w[1].mean) * (w[1].y - w[0].y))
                    .sum()
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for c in &self.cells {
            wr.serialize(c)?;
        }
        wr.flush()?;
        Ok(())
    }
}

impl CdfCurves {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for p in &self.points {
            wr.serialize(p)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// `∫ |f − g| dy` per x-slice, by the trapezoid rule on the shared grid.
pub fn integrated_abs_distance(a: &DensityGrid, b: &DensityGrid) -> Result<Vec<f64>> {
    if a.x != b.x || a.y != b.y {
        return Err(LsbpError::InvalidArgument("grids differ".into()));
    }
    Ok((0..a.x.len())
        .map(|i| {
            let (sa, sb) = (a.slice(i), b.slice(i));
            (1..sa.len())
                .map(|k| {
                    let d0 = (sa[k - 1].mean - sb[k - 1].mean).abs();
                    let d1 = (sa[k].mean - sb[k].mean).abs();
                    0.5 * (d0 + d1) * (sa[k].y - sa[k - 1].y)
                })
                .sum()
        })
        .collect())
}
