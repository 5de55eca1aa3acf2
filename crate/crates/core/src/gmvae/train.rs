//! Autoencoder pretraining, mixture initialisation and joint training.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, Var};

use super::arch::{Network, HEAD_LOGVAR, LATENT_DIM, LAYERS, PIXELS};
use super::em::{fit_gmm, EmConfig};
use super::loss::{elbo_loss, sample_noise, BoundModel};
use super::mixture::Mixture;
use super::GmvaeModel;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Adam `β₁`.
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Monte Carlo samples per input.
    pub mc_samples: usize,
    pub pretrain_epochs: usize,
    pub seed: u64,
    /// Mixture components.
    pub components: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 100,
            epochs: 10,
            mc_samples: 1,
            pretrain_epochs: 5,
            seed: 0,
            components: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.momentum].iter().all(|v| *v > 0.0 && v.is_finite())
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.mc_samples > 0
            && self.components > 0;
        if !positive || self.momentum >= 1.0 {
            return Err(contract_err!("invalid training configuration {self:?}"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.momentum,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Epoch-mean training curves.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Per-pixel squared error during pretraining.
    pub pretrain_mse: Vec<f64>,
    pub em_log_likelihood: Vec<f64>,
    pub loss: Vec<f64>,
    pub reconstruction: Vec<f64>,
    pub kl: Vec<f64>,
}

fn check_patches(x: &Tensor) -> Result<usize> {
    match *x.shape() {
        [n, 3, 28, 28] if n > 0 => Ok(n),
        [0, ..] => Err(contract_err!("no training patches")),
        ref s => Err(dim_err!("training patches must be N×3×28×28, got {s:?}")),
    }
}

fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}

fn flatten(net: &Network) -> Vec<Tensor> {
    net.layers.iter().flat_map(|(w, b)| [w.clone(), b.clone()]).collect()
}

fn unflatten(params: &[Tensor]) -> Network {
    Network {
        layers: params.chunks(2).map(|p| (p[0].clone(), p[1].clone())).collect(),
    }
}

fn grads_of(g: &mut Graph, vars: &[Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect()
}

/// Train the encoder trunk, mean head and decoder as a deterministic
/// autoencoder (`z = μ̃`). The log-variance head is left untouched.
/// Returns the epoch-mean per-pixel squared error.
pub fn pretrain(net: &mut Network, x: &Tensor, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = check_patches(x)?;
    let active: Vec<usize> = (0..LAYERS.len()).filter(|&i| i != HEAD_LOGVAR).collect();
    let slots: Vec<usize> = active.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect();
    let mut all = flatten(net);
    let mut params: Vec<Tensor> = slots.iter().map(|&s| all[s].clone()).collect();
    let mut adam = AdamState::new(cfg.adam(), &params, vec![true; params.len()])?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0001);
    let mut history = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let mut total = 0.0;
        for idx in batches(n, cfg.batch_size, &mut rng) {
            for (p, &s) in params.iter().zip(&slots) {
                all[s] = p.clone();
            }
            let current = unflatten(&all);
            let mut g = Graph::new();
            let bound = current.bind(&mut g, |i| i != HEAD_LOGVAR);
            let xb = g.constant(x.gather_outer(&idx)?);
            let mu = bound.encode_mean(&mut g, xb)?;
            let rec = bound.decode(&mut g, mu)?;
            let diff = g.sub(xb, rec)?;
            let sq = g.square(diff);
            let flat = g.reshape(sq, &[idx.len(), PIXELS])?;
            let per = g.sum_axis(flat, 1)?;
            let loss = g.mean(per);
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(crate::Error::Numerical(format!("pretraining loss diverged in epoch {epoch}")));
            }
            g.backward(loss)?;
            let vars: Vec<Var> = active.iter().flat_map(|&i| [bound.vars[i].0, bound.vars[i].1]).collect();
            let grads = grads_of(&mut g, &vars);
            adam.step(&mut params, &grads)?;
            total += value * idx.len() as f64;
        }
        let mse = total / (n * PIXELS) as f64;
        info!("pretrain epoch {} mse {:.6}", epoch + 1, mse);
        history.push(mse);
    }
    for (p, &s) in params.iter().zip(&slots) {
        all[s] = p.clone();
    }
    *net = unflatten(&all);
    Ok(history)
}

/// Batch-mean loss builder used by [`fit_joint_with`].
pub type LossBuilder<'a> = dyn Fn(&mut Graph, &BoundModel, Var, &[Tensor]) -> Result<(Var, Var, Var)> + 'a;

/// Joint Adam optimisation of all network and mixture parameters under a
/// caller-supplied loss. Weight decay applies to network parameters only.
pub fn fit_joint_with(
    model: &mut GmvaeModel,
    x: &Tensor,
    cfg: &TrainConfig,
    build: &LossBuilder<'_>,
    report: &mut TrainReport,
) -> Result<()> {
    cfg.validate()?;
    let n = check_patches(x)?;
    let mut params = flatten(&model.net);
    let net_slots = params.len();
    params.extend([
        model.mixture.logits.clone(),
        model.mixture.means.clone(),
        model.mixture.log_vars.clone(),
    ]);
    let decay = (0..params.len()).map(|i| i < net_slots).collect();
    let mut adam = AdamState::new(cfg.adam(), &params, decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0002);
    for epoch in 0..cfg.epochs {
        let (mut tl, mut tr, mut tk) = (0.0, 0.0, 0.0);
        for idx in batches(n, cfg.batch_size, &mut rng) {
            let current = GmvaeModel {
                net: unflatten(&params[..net_slots]),
                mixture: Mixture::new(
                    params[net_slots].clone(),
                    params[net_slots + 1].clone(),
                    params[net_slots + 2].clone(),
                )?,
            };
            let eps: Vec<Tensor> = (0..cfg.mc_samples).map(|_| sample_noise(idx.len(), &mut rng)).collect();
            let mut g = Graph::new();
            let bound = BoundModel::bind(&current, &mut g, true);
            let xb = g.constant(x.gather_outer(&idx)?);
            let (loss, rec, kl) = build(&mut g, &bound, xb, &eps)?;
            let w = idx.len() as f64;
            tl += g.value(loss).item()? * w;
            tr += g.value(rec).item()? * w;
            tk += g.value(kl).item()? * w;
            g.backward(loss)?;
            let mut vars: Vec<Var> = bound.net.vars.iter().flat_map(|&(a, b)| [a, b]).collect();
            vars.extend([bound.logits, bound.means, bound.log_vars]);
            let grads = grads_of(&mut g, &vars);
            adam.step(&mut params, &grads)?;
        }
        let nf = n as f64;
        info!(
            "epoch {} loss {:.4} reconstruction {:.4} kl {:.4}",
            epoch + 1,
            tl / nf,
            tr / nf,
            tk / nf
        );
        report.loss.push(tl / nf);
        report.reconstruction.push(tr / nf);
        report.kl.push(tk / nf);
    }
    model.net = unflatten(&params[..net_slots]);
    model.mixture = Mixture::new(
        params[net_slots].clone(),
        params[net_slots + 1].clone(),
        params[net_slots + 2].clone(),
    )?;
    Ok(())
}

/// Pretrain, fit the mixture to the pretrained codes, then optimise the
/// negative ELBO jointly. Deterministic for a fixed seed.
pub fn train(x: &Tensor, cfg: &TrainConfig) -> Result<(GmvaeModel, TrainReport)> {
    cfg.validate()?;
    let n = check_patches(x)?;
    if n < cfg.components {
        return Err(contract_err!("{n} patches cannot seed {} components", cfg.components));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::glorot(&mut rng);
    let mut report = TrainReport {
        pretrain_mse: pretrain(&mut net, x, cfg)?,
        ..TrainReport::default()
    };

    let probe = GmvaeModel {
        net: net.clone(),
        mixture: Mixture::from_moments(&[1.0], Tensor::zeros(&[1, LATENT_DIM]), &Tensor::ones(&[1, LATENT_DIM]))?,
    };
    let latents = probe.encode_means(x, cfg.batch_size)?;
    let em = fit_gmm(
        &latents,
        cfg.components,
        &EmConfig {
            seed: cfg.seed,
            ..EmConfig::default()
        },
    )?;
    debug!("EM converged after {} iterations", em.log_likelihood.len());
    report.em_log_likelihood = em.log_likelihood;

    // start the posterior variance well inside the prior's
    let k = cfg.components;
    let lv = em.mixture.log_vars.data();
    let bias: Vec<f64> = (0..LATENT_DIM)
        .map(|d| (0..k).map(|c| lv[c * LATENT_DIM + d]).sum::<f64>() / k as f64 - 2.0)
        .collect();
    net.layers[HEAD_LOGVAR] = (Tensor::zeros(&[LATENT_DIM, LATENT_DIM]), Tensor::from_vec(bias));

    let mut model = GmvaeModel::new(net, em.mixture)?;
    let build = |g: &mut Graph, b: &BoundModel, xb: Var, eps: &[Tensor]| {
        let l = elbo_loss(g, b, xb, eps)?;
        Ok((l.total, l.reconstruction, l.kl))
    };
    fit_joint_with(&mut model, x, cfg, &build, &mut report)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(value: f64) -> Tensor {
        Tensor::new(
            vec![1, 3, 28, 28],
            (0..PIXELS).map(|i| value * (0.5 + 0.5 * ((i % 28) as f64 / 27.0))).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_pretrain_epochs_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::glorot(&mut rng);
        let before = net.clone();
        let cfg = TrainConfig {
            pretrain_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(pretrain(&mut net, &patch(0.5), &cfg).unwrap().is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { mc_samples: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(train(&Tensor::zeros(&[0, 3, 28, 28]), &TrainConfig::default()).is_err());
        assert!(train(&patch(0.5), &TrainConfig { components: 2, ..TrainConfig::default() }).is_err());
    }
}
