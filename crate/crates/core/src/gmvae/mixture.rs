//! Mixture-of-Gaussians prior over the latent space.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Lower bound on every variance, prior and posterior.
pub const VARIANCE_FLOOR: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn log_variance_floor() -> f64 {
    VARIANCE_FLOOR.ln()
}

/// `K` diagonal Gaussian components with softmax-parameterised weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    /// Unnormalised log-weights, `[K]`.
    pub logits: Tensor,
    /// Component means, `[K, D]`.
    pub means: Tensor,
    /// Component log-variances, `[K, D]` (floored on use).
    pub log_vars: Tensor,
}

/// `log Σ exp` of a slice; `-∞` for an empty or all-`-∞` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Mixture {
    pub fn new(logits: Tensor, means: Tensor, log_vars: Tensor) -> Result<Self> {
        let k = logits.len();
        if logits.shape() != [k] || k == 0 {
            return Err(dim_err!("mixture logits must be a non-empty vector, got {:?}", logits.shape()));
        }
        match *means.shape() {
            [mk, _] if mk == k => {}
            _ => return Err(dim_err!("means {:?} do not match {k} components", means.shape())),
        }
        if log_vars.shape() != means.shape() {
            return Err(dim_err!("log-variances {:?} vs means {:?}", log_vars.shape(), means.shape()));
        }
        Ok(Mixture {
            logits,
            means,
            log_vars,
        })
    }

    /// Build from weights and variances (weights need not be normalised).
    pub fn from_moments(weights: &[f64], means: Tensor, variances: &Tensor) -> Result<Self> {
        let logits = Tensor::from_vec(weights.iter().map(|w| w.max(f64::MIN_POSITIVE).ln()).collect());
        let log_vars = variances.map(|v| v.max(VARIANCE_FLOOR).ln());
        Self::new(logits, means, log_vars)
    }

    pub fn components(&self) -> usize {
        self.logits.len()
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    pub fn log_weights(&self) -> Vec<f64> {
        let lse = log_sum_exp(self.logits.data());
        self.logits.data().iter().map(|l| l - lse).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights().into_iter().map(f64::exp).collect()
    }

    fn floored_log_var(&self, c: usize, d: usize) -> f64 {
        self.log_vars.data()[c * self.dim() + d].max(log_variance_floor())
    }

    /// `log N(z | μ_c, σ_c²)` for each component.
    pub fn log_densities(&self, z: &[f64]) -> Result<Vec<f64>> {
        let dim = self.dim();
        if z.len() != dim {
            return Err(dim_err!("latent has {} dims, mixture has {dim}", z.len()));
        }
        Ok((0..self.components())
            .map(|c| {
                let mu = &self.means.data()[c * dim..(c + 1) * dim];
                let quad: f64 = (0..dim)
                    .map(|d| {
                        let lv = self.floored_log_var(c, d);
                        lv + (z[d] - mu[d]).powi(2) / lv.exp()
                    })
                    .sum();
                -0.5 * (dim as f64 * LN_2PI + quad)
            })
            .collect())
    }

    /// `log π_c + log N(z | μ_c, σ_c²)` for each component.
    pub fn log_joint(&self, z: &[f64]) -> Result<Vec<f64>> {
        let lw = self.log_weights();
        Ok(self.log_densities(z)?.into_iter().zip(lw).map(|(a, b)| a + b).collect())
    }

    /// `log Σ_c π_c N(z | μ_c, σ_c²)`.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        Ok(log_sum_exp(&self.log_joint(z)?))
    }

    /// Posterior component probabilities for a latent code, in log space.
    pub fn responsibilities(&self, z: &[f64]) -> Result<Vec<f64>> {
        let joint = self.log_joint(z)?;
        let lse = log_sum_exp(&joint);
        let gamma: Vec<f64> = joint.iter().map(|j| (j - lse).exp()).collect();
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("responsibilities are not finite".into()));
        }
        Ok(gamma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_component_owns_everything() {
        let m = Mixture::from_moments(&[1.0], Tensor::zeros(&[1, 3]), &Tensor::ones(&[1, 3])).unwrap();
        assert_eq!(m.responsibilities(&[5.0, -2.0, 0.1]).unwrap(), vec![1.0]);
    }

    #[test]
    fn mirror_components_split_evenly() {
        let means = Tensor::new(vec![2, 2], vec![1.5, -0.5, -1.5, 0.5]).unwrap();
        let m = Mixture::from_moments(&[0.5, 0.5], means, &Tensor::full(&[2, 2], 0.7)).unwrap();
        let g = m.responsibilities(&[0.0, 0.0]).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
    }

    /// Direct ratio of densities, no log space.
    fn direct_gamma(w: &[f64], means: &[Vec<f64>], vars: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
        let dens: Vec<f64> = (0..w.len())
            .map(|c| {
                w[c] * z
                    .iter()
                    .enumerate()
                    .map(|(d, zd)| {
                        (-(zd - means[c][d]).powi(2) / (2.0 * vars[c][d])).exp()
                            / (2.0 * std::f64::consts::PI * vars[c][d]).sqrt()
                    })
                    .product::<f64>()
            })
            .collect();
        let total: f64 = dens.iter().sum();
        dens.iter().map(|d| d / total).collect()
    }

    #[test]
    fn matches_direct_density_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (k, d) = (3, 4);
            let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = w.iter().sum();
            let w: Vec<f64> = w.iter().map(|x| x / total).collect();
            let means: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let vars: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.gen_range(0.3..2.0)).collect()).collect();
            let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let m = Mixture::from_moments(
                &w,
                Tensor::new(vec![k, d], means.concat()).unwrap(),
                &Tensor::new(vec![k, d], vars.concat()).unwrap(),
            )
            .unwrap();
            let got = m.responsibilities(&z).unwrap();
            let want = direct_gamma(&w, &means, &vars, &z);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10);
            }
            assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_checks() {
        assert!(Mixture::new(Tensor::zeros(&[2]), Tensor::zeros(&[3, 4]), Tensor::zeros(&[3, 4])).is_err());
        let m = Mixture::new(Tensor::zeros(&[2]), Tensor::zeros(&[2, 4]), Tensor::zeros(&[2, 4])).unwrap();
        assert!(m.log_density(&[0.0; 3]).is_err());
        assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
