//! Starting points shared by the engines: a k-means partition of the units
//! on the response and the non-constant kernel covariates, and parameters
//! fitted to that partition.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::linalg::GaussianCanonical;
use crate::model::{Dataset, MixtureParams, ModelConfig, PriorPrecisions};

const LLOYD_ITERATIONS: usize = 50;

fn feature_rows(data: &Dataset) -> Vec<Vec<f64>> {
    let n = data.n();
    let mut cols: Vec<Vec<f64>> = vec![data.y.iter().copied().collect()];
    for j in 0..data.p() {
        let c: Vec<f64> = data.lambda.column(j).iter().copied().collect();
        if c.iter().any(|&v| (v - c[0]).abs() > 1e-12) {
            cols.push(c);
        }
    }
    for c in cols.iter_mut() {
        let m = c.iter().sum::<f64>() / n as f64;
        let sd = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for v in c.iter_mut() {
            *v = (*v - m) / sd;
        }
    }
    (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means++ seeding followed by Lloyd iterations; features are jittered by
/// `jitter` standard deviations so restarts explore different partitions.
/// Clusters are relabelled by decreasing size.
pub fn kmeans_memberships<R: Rng + ?Sized>(
    data: &Dataset,
    k: usize,
    jitter: f64,
    rng: &mut R,
) -> Vec<usize> {
    let n = data.n();
    if k <= 1 || n == 0 {
        return vec![0; n];
    }
    let mut rows = feature_rows(data);
    for r in rows.iter_mut() {
        for v in r.iter_mut() {
            *v += jitter * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut centers: Vec<Vec<f64>> = vec![rows[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = rows.iter().map(|r| dist2(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(rows[next].clone());
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(dist2(r, &centers[centers.len() - 1]));
        }
    }
    let mut g = vec![0usize; n];
    for _ in 0..LLOYD_ITERATIONS {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| dist2(r, &centers[a]).total_cmp(&dist2(r, &centers[b])))
                .unwrap_or(0);
            if best != g[i] {
                g[i] = best;
                changed = true;
            }
        }
        let dim = rows[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, r) in rows.iter().enumerate() {
            counts[g[i]] += 1;
            for (s, v) in sums[g[i]].iter_mut().zip(r) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    let mut counts = vec![0usize; k];
    for &c in &g {
        counts[c] += 1;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut relabel = vec![0usize; k];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }
    g.iter().map(|&c| relabel[c]).collect()
}

/// Parameters matched to a partition: ridge-regularized kernel fits and
/// shrunk residual variances; log-odds coefficients start at the prior mean.
pub fn params_from_partition(
    data: &Dataset,
    config: &ModelConfig,
    prec: &PriorPrecisions,
    g: &[usize],
) -> Result<MixtureParams> {
    let h = config.h;
    let n = data.n();
    let p = config.p();
    let y_mean = if n > 0 { data.y.mean() } else { 0.0 };
    let y_var = if n > 1 {
        data.y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        1.0
    };
    let y_var = if y_var > 0.0 { y_var } else { 1.0 };
    let tau0 = 1.0 / y_var;

    let mut beta = DMatrix::zeros(h, p);
    let mut sigma2 = DVector::zeros(h);
    for k in 0..h {
        let members: Vec<usize> = (0..n).filter(|&i| g[i] == k).collect();
        let mut q = prec.beta_prec.clone();
        let mut b = prec.beta_shift.clone();
        for &i in &members {
            let l = data.lambda.row(i).transpose();
            q += tau0 * &l * l.transpose();
            b += tau0 * data.y[i] * &l;
        }
        let fit = GaussianCanonical::new(q, &b, "initial kernel")?;
        let rss: f64 = members
            .iter()
            .map(|&i| (data.y[i] - data.lambda.row(i).dot(&fit.mean.transpose())).powi(2))
            .sum();
        sigma2[k] = (rss + y_var) / (members.len() as f64 + 1.0);
        beta.set_row(k, &fit.mean.transpose());
    }

    let r = config.r();
    let alpha = DMatrix::from_fn(h.saturating_sub(1), r, |_, j| config.mu_alpha[j]);
    Ok(MixtureParams {
        alpha,
        beta,
        sigma2,
    })
}

/// Partition plus fitted parameters, drawn from `rng`.
pub fn initial_params<R: Rng + ?Sized>(
    data: &Dataset,
    config: &ModelConfig,
    prec: &PriorPrecisions,
    jitter: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, MixtureParams)> {
    let g = kmeans_memberships(data, config.h, jitter, rng);
    let params = params_from_partition(data, config, prec, &g)?;
    Ok((g, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn two_groups() -> Dataset {
        let n = 40;
        let y = DVector::from_fn(n, |i, _| if i < 30 { -2.0 + 0.01 * i as f64 } else { 3.0 + 0.01 * i as f64 });
        let lambda = DMatrix::from_element(n, 1, 1.0);
        let psi = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i % 7) as f64 });
        Dataset::new(y, lambda, psi).unwrap()
    }

    #[test]
    fn recovers_obvious_partition_sorted_by_size() {
        let d = two_groups();
        let g = kmeans_memberships(&d, 2, 0.0, &mut RngStream::new(1));
        assert!(g[..30].iter().all(|&c| c == 0));
        assert!(g[30..].iter().all(|&c| c == 1));
    }

    #[test]
    fn params_match_partition() {
        let d = two_groups();
        let c = ModelConfig::standard(2, 1, 2, 1.0, 1.0).unwrap();
        let prec = c.precisions().unwrap();
        let (g, p) = initial_params(&d, &c, &prec, 0.0, &mut RngStream::new(2)).unwrap();
        p.validate(&c).unwrap();
        assert_eq!(g.len(), 40);
        assert!(p.beta[(0, 0)] < 0.0 && p.beta[(1, 0)] > 0.0);
        assert!(p.alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn single_cluster_and_deterministic() {
        let d = two_groups();
        assert!(kmeans_memberships(&d, 1, 0.1, &mut RngStream::new(3)).iter().all(|&c| c == 0));
        let a = kmeans_memberships(&d, 4, 0.1, &mut RngStream::new(3));
        let b = kmeans_memberships(&d, 4, 0.1, &mut RngStream::new(3));
        assert_eq!(a, b);
    }
}
