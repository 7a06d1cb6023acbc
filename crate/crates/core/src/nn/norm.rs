//! Spatial batch normalization over the `N*H*W` extent of each channel.

use ndarray::{Array1, Array2, Axis, Zip};

use super::Act;
use crate::Real;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BnCache<F> {
    xhat: Array2<F>,
    inv_std: Vec<F>,
    batch_stats: bool,
}

/// Per-channel mean and biased variance of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
    pub count: usize,
}

/// Running statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<F> {
    pub mean: Array1<F>,
    pub var: Array1<F>,
}

impl<F: Real> RunningStats<F> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Array1::zeros(channels),
            var: Array1::ones(channels),
        }
    }

    /// Exponential moving average update; variance uses the unbiased estimate.
    pub fn absorb(&mut self, stats: &BatchStats<F>) {
        let m = F::lit(BN_MOMENTUM);
        let keep = F::one() - m;
        let count = stats.count.max(2);
        let unbias = F::lit(count as f64 / (count - 1) as f64);
        for c in 0..self.mean.len() {
            self.mean[c] = keep * self.mean[c] + m * stats.mean[c];
            self.var[c] = keep * self.var[c] + m * stats.var[c] * unbias;
        }
    }
}

fn normalize<F: Real>(x: &Act<F>, mean: &[F], inv_std: &[F], gamma: &[F], beta: &[F]) -> (Act<F>, Array2<F>) {
    let mut xhat = x.data.clone();
    let mut y = Array2::zeros(x.data.dim());
    for (c, (mut xr, mut yr)) in xhat.axis_iter_mut(Axis(0)).zip(y.axis_iter_mut(Axis(0))).enumerate() {
        let (mu, is, ga, be) = (mean[c], inv_std[c], gamma[c], beta[c]);
        Zip::from(&mut xr).and(&mut yr).for_each(|xv, yv| {
            *xv = (*xv - mu) * is;
            *yv = ga * *xv + be;
        });
    }
    (Act { data: y, n: x.n, h: x.h, w: x.w }, xhat)
}

/// Training-phase normalization with batch statistics.
pub fn forward_batch<F: Real>(x: &Act<F>, gamma: &[F], beta: &[F]) -> (Act<F>, BnCache<F>, BatchStats<F>) {
    let count = x.data.ncols();
    let cnt = F::lit(count as f64);
    let mut mean = Vec::with_capacity(x.channels());
    let mut var = Vec::with_capacity(x.channels());
    for row in x.data.axis_iter(Axis(0)) {
        let mu = row.sum() / cnt;
        let v = row.iter().map(|&a| (a - mu) * (a - mu)).sum::<F>() / cnt;
        mean.push(mu);
        var.push(v);
    }
    let eps = F::lit(BN_EPS);
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let (y, xhat) = normalize(x, &mean, &inv_std, gamma, beta);
    let cache = BnCache {
        xhat,
        inv_std,
        batch_stats: true,
    };
    (y, cache, BatchStats { mean, var, count })
}

/// Evaluation-phase normalization with running statistics.
pub fn forward_running<F: Real>(x: &Act<F>, gamma: &[F], beta: &[F], stats: &RunningStats<F>) -> (Act<F>, BnCache<F>) {
    let eps = F::lit(BN_EPS);
    let mean: Vec<F> = stats.mean.to_vec();
    let inv_std: Vec<F> = stats.var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let (y, xhat) = normalize(x, &mean, &inv_std, gamma, beta);
    let cache = BnCache {
        xhat,
        inv_std,
        batch_stats: false,
    };
    (y, cache)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn backward<F: Real>(dy: &Act<F>, cache: &BnCache<F>, gamma: &[F], need_dx: bool) -> (Option<Act<F>>, Vec<F>, Vec<F>) {
    let channels = dy.channels();
    let count = F::lit(dy.data.ncols() as f64);
    let mut dgamma = Vec::with_capacity(channels);
    let mut dbeta = Vec::with_capacity(channels);
    let mut dx = need_dx.then(|| Array2::<F>::zeros(dy.data.dim()));
    #[allow(clippy::needless_range_loop)]
    for c in 0..channels {
        let dyr = dy.data.row(c);
        let xr = cache.xhat.row(c);
        let sum_dy = dyr.sum();
        let sum_dy_xhat: F = dyr.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum();
        dgamma.push(sum_dy_xhat);
        dbeta.push(sum_dy);
        if let Some(dx) = dx.as_mut() {
            let scale = gamma[c] * cache.inv_std[c];
            let mut out = dx.row_mut(c);
            if cache.batch_stats {
                let mean_dy = sum_dy / count;
                let mean_dy_xhat = sum_dy_xhat / count;
                Zip::from(&mut out).and(&dyr).and(&xr).for_each(|o, &g, &xh| {
                    *o = scale * (g - mean_dy - xh * mean_dy_xhat);
                });
            } else {
                Zip::from(&mut out).and(&dyr).for_each(|o, &g| *o = scale * g);
            }
        }
    }
    let dx = dx.map(|data| Act { data, n: dy.n, h: dy.h, w: dy.w });
    (dx, dgamma, dbeta)
}
