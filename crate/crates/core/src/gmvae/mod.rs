//! Gaussian-mixture fully-convolutional VAE.

pub mod arch;
pub mod em;
pub mod loss;
pub mod mixture;
pub mod persist;
pub mod train;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Result};
use crate::par;
use crate::tensor::Tensor;

pub use arch::{LayerSpec, Network, LATENT_DIM, LAYERS, PIXELS};
pub use em::{fit_gmm, EmConfig, EmResult};
pub use loss::{elbo_loss, elbo_value, kl_portion, BoundModel, LossVars};
pub use mixture::{Mixture, VARIANCE_FLOOR};
pub use train::{pretrain, train, TrainConfig, TrainReport};

/// Network weights plus the mixture prior.
#[derive(Clone, Debug, PartialEq)]
pub struct GmvaeModel {
    pub net: Network,
    pub mixture: Mixture,
}

impl GmvaeModel {
    pub fn new(net: Network, mixture: Mixture) -> Result<Self> {
        net.validate()?;
        if mixture.dim() != LATENT_DIM {
            return Err(dim_err!("mixture has {} dims, latent space has {LATENT_DIM}", mixture.dim()));
        }
        Ok(GmvaeModel { net, mixture })
    }

    pub fn components(&self) -> usize {
        self.mixture.components()
    }

    /// `[N, 3, 28, 28]` → (`μ̃`, floored `log σ̃²`), each `[N, 64]`.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (mu, lv) = self.net.encode(x)?;
        Ok((mu, lv.map(|v| v.max(mixture::log_variance_floor()))))
    }

    /// Posterior means for a large batch, processed in chunks of `chunk`.
    pub fn encode_means(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = x.shape().first().copied().unwrap_or(0);
        let starts: Vec<usize> = (0..n).step_by(chunk.max(1)).collect();
        let parts = par::try_map(&starts, |&s| {
            let idx: Vec<usize> = (s..(s + chunk).min(n)).collect();
            self.net.encode(&x.gather_outer(&idx)?).map(|r| r.0)
        })?;
        let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(vec![n, LATENT_DIM], data)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.net.decode(z)
    }

    pub fn responsibilities(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.mixture.responsibilities(z)
    }
}

/// `z = μ̃ + exp(½ log σ̃²) ⊙ ε` with fresh `ε ~ N(0, I)`.
pub fn sample_latent<R: Rng + ?Sized>(mu: &[f64], logvar: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if mu.len() != logvar.len() {
        return Err(dim_err!("mean has {} dims, log-variance {}", mu.len(), logvar.len()));
    }
    Ok(mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m + (0.5 * lv).exp() * rng.sample::<f64, _>(StandardNormal))
        .collect())
}
