//! Diagonal Gaussian mixture fitted by EM, used to initialise the prior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, dim_err, Result};
use crate::par;
use crate::tensor::Tensor;

use super::mixture::{log_sum_exp, Mixture, VARIANCE_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmResult {
    pub mixture: Mixture,
    /// Mean per-point log-likelihood after each E-step.
    pub log_likelihood: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means++ seeding: indices of `k` distinct-ish points.
fn kmeanspp(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, points[next]));
        }
    }
    chosen
}

/// Fit a `k`-component diagonal mixture to `latents: [N, D]`.
pub fn fit_gmm(latents: &Tensor, k: usize, cfg: &EmConfig) -> Result<EmResult> {
    let (n, d) = match *latents.shape() {
        [n, d] => (n, d),
        ref s => return Err(dim_err!("latents must be N×D, got {s:?}")),
    };
    if k == 0 || n < k {
        return Err(contract_err!("cannot fit {k} components to {n} points"));
    }
    let points: Vec<&[f64]> = latents.data().chunks(d).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let global_var: Vec<f64> = (0..d)
        .map(|j| {
            let m = points.iter().map(|p| p[j]).sum::<f64>() / n as f64;
            (points.iter().map(|p| (p[j] - m).powi(2)).sum::<f64>() / n as f64).max(VARIANCE_FLOOR)
        })
        .collect();
    let seeds = kmeanspp(&points, k, &mut rng);
    let mut weights = vec![1.0 / k as f64; k];
    let mut means: Vec<f64> = seeds.iter().flat_map(|&i| points[i].iter().copied()).collect();
    let mut vars: Vec<f64> = (0..k).flat_map(|_| global_var.iter().copied()).collect();
    let mut trace = Vec::new();

    for _ in 0..cfg.max_iter {
        let mix = Mixture::from_moments(
            &weights,
            Tensor::new(vec![k, d], means.clone())?,
            &Tensor::new(vec![k, d], vars.clone())?,
        )?;
        // E-step
        let rows: Vec<(Vec<f64>, f64)> = par::try_map(&points, |p| {
            let joint = mix.log_joint(p)?;
            let lse = log_sum_exp(&joint);
            Ok((joint.iter().map(|j| (j - lse).exp()).collect(), lse))
        })?;
        let ll = rows.iter().map(|r| r.1).sum::<f64>() / n as f64;
        let prev = trace.last().copied();
        trace.push(ll);

        // M-step
        for c in 0..k {
            let nk: f64 = rows.iter().map(|r| r.0[c]).sum::<f64>().max(1e-12);
            weights[c] = nk / n as f64;
            for j in 0..d {
                let m = rows.iter().zip(&points).map(|(r, p)| r.0[c] * p[j]).sum::<f64>() / nk;
                let v = rows.iter().zip(&points).map(|(r, p)| r.0[c] * (p[j] - m).powi(2)).sum::<f64>() / nk;
                means[c * d + j] = m;
                vars[c * d + j] = v.max(VARIANCE_FLOOR);
            }
        }
        if let Some(p) = prev {
            if ((ll - p) / p.abs().max(1e-12)).abs() < cfg.tol {
                break;
            }
        }
    }
    let mixture = Mixture::from_moments(&weights, Tensor::new(vec![k, d], means)?, &Tensor::new(vec![k, d], vars)?)?;
    Ok(EmResult {
        mixture,
        log_likelihood: trace,
    })
}
