//! Negative evidence lower bound under the mixture prior.
//!
//! Per sample, with `γ` the component posterior of the sampled code:
//!
//! ```text
//! loss = ‖x − x̃‖²
//!      + Σ_c γ_c · ½ Σ_d (log σ_c² + σ̃²/σ_c² + (μ̃ − μ_c)²/σ_c²)
//!      − Σ_c γ_c · log(π_c / γ_c)
//!      − ½ Σ_d (1 + log σ̃²)
//! ```
//!
//! Everything after the reconstruction term is the KL divergence between the
//! variational posterior and the mixture prior. `γ` stays differentiable.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::{Graph, Tensor, Var};

use super::arch::{BoundNetwork, LATENT_DIM, PIXELS};
use super::mixture::log_variance_floor;
use super::GmvaeModel;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Graph handles of a whole model.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub net: BoundNetwork,
    pub logits: Var,
    pub means: Var,
    pub log_vars: Var,
}

impl BoundModel {
    pub fn bind(model: &GmvaeModel, g: &mut Graph, trainable: bool) -> Self {
        let net = model.net.bind(g, |_| trainable);
        let leaf = |g: &mut Graph, t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        BoundModel {
            net,
            logits: leaf(g, &model.mixture.logits),
            means: leaf(g, &model.mixture.means),
            log_vars: leaf(g, &model.mixture.log_vars),
        }
    }
}

/// Handles to the loss and its two parts (batch means).
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub reconstruction: Var,
    pub kl: Var,
}

/// `z = μ̃ + exp(½ log σ̃²) ⊙ ε`.
pub fn reparameterize(g: &mut Graph, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = g.scale(logvar, 0.5);
    let sd = g.exp(half);
    let noise = g.mul(sd, eps)?;
    g.add(mu, noise)
}

/// Log-space component posterior `log γ` for codes `z: [N, D]`, shape `[N, K]`.
pub fn log_responsibilities(g: &mut Graph, z: Var, logits: Var, means: Var, log_vars: Var) -> Result<Var> {
    let (n, d) = match *g.shape(z) {
        [n, d] => (n, d),
        ref s => return Err(dim_err!("codes must be N×D, got {s:?}")),
    };
    let lv_c = g.clamp_min(log_vars, log_variance_floor());
    let var_c = g.exp(lv_c);
    let lse_pi = g.logsumexp(logits, 0)?;
    let log_pi = g.sub(logits, lse_pi)?;
    let z3 = g.reshape(z, &[n, 1, d])?;
    let diff = g.sub(z3, means)?;
    let sq = g.square(diff);
    let scaled = g.div(sq, var_c)?;
    let quad = g.add(scaled, lv_c)?;
    let s = g.sum_axis(quad, 2)?;
    let s = g.scale(s, -0.5);
    let log_n = g.add_scalar(s, -0.5 * d as f64 * LN_2PI);
    let joint = g.add(log_n, log_pi)?;
    let lse = g.logsumexp(joint, 1)?;
    let lse = g.reshape(lse, &[n, 1])?;
    g.sub(joint, lse)
}

/// Per-sample KL part of the loss, shape `[N]`. `logvar` is the floored
/// posterior log-variance; `z` the code used for the responsibilities.
pub fn mixture_kl(g: &mut Graph, mu: Var, logvar: Var, z: Var, logits: Var, means: Var, log_vars: Var) -> Result<Var> {
    let (n, d) = match *g.shape(mu) {
        [n, d] => (n, d),
        ref s => return Err(dim_err!("posterior mean must be N×D, got {s:?}")),
    };
    let log_gamma = log_responsibilities(g, z, logits, means, log_vars)?;
    let gamma = g.exp(log_gamma);

    let lv_c = g.clamp_min(log_vars, log_variance_floor());
    let var_c = g.exp(lv_c);
    let var_t = g.exp(logvar);
    let vt3 = g.reshape(var_t, &[n, 1, d])?;
    let mu3 = g.reshape(mu, &[n, 1, d])?;
    let ratio = g.div(vt3, var_c)?;
    let diff = g.sub(mu3, means)?;
    let sq = g.square(diff);
    let maha = g.div(sq, var_c)?;
    let a = g.add(ratio, maha)?;
    let a = g.add(a, lv_c)?;
    let a = g.sum_axis(a, 2)?;
    let a = g.scale(a, 0.5);
    let weighted = g.mul(gamma, a)?;
    let cross = g.sum_axis(weighted, 1)?;

    let lse_pi = g.logsumexp(logits, 0)?;
    let log_pi = g.sub(logits, lse_pi)?;
    let log_ratio = g.sub(log_pi, log_gamma)?;
    let wr = g.mul(gamma, log_ratio)?;
    let cat = g.sum_axis(wr, 1)?;

    let one_plus = g.add_scalar(logvar, 1.0);
    let ent = g.sum_axis(one_plus, 1)?;
    let ent = g.scale(ent, -0.5);

    let kl = g.sub(cross, cat)?;
    g.add(kl, ent)
}

/// Draw `[N, 64]` standard-normal noise.
pub fn sample_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let data = (0..n * LATENT_DIM).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![n, LATENT_DIM], data).expect("noise shape")
}

/// Build the batch-mean loss for `x: [N, 3, 28, 28]`, one decoder pass per
/// noise tensor in `eps` (the Monte Carlo samples).
pub fn elbo_loss(g: &mut Graph, model: &BoundModel, x: Var, eps: &[Tensor]) -> Result<LossVars> {
    if eps.is_empty() {
        return Err(contract_err!("at least one Monte Carlo sample is required"));
    }
    let n = g.shape(x)[0];
    let (mu, raw_lv) = model.net.encode(g, x)?;
    let logvar = g.clamp_min(raw_lv, log_variance_floor());
    let inv_l = 1.0 / eps.len() as f64;
    let mut rec_acc: Option<Var> = None;
    let mut kl_acc: Option<Var> = None;
    for e in eps {
        if e.shape() != [n, LATENT_DIM] {
            return Err(dim_err!("noise {:?} does not match batch {n}", e.shape()));
        }
        let ev = g.constant(e.clone());
        let z = reparameterize(g, mu, logvar, ev)?;
        let recon = model.net.decode(g, z)?;
        let diff = g.sub(x, recon)?;
        let sq = g.square(diff);
        let flat = g.reshape(sq, &[n, PIXELS])?;
        let rec = g.sum_axis(flat, 1)?;
        let kl = mixture_kl(g, mu, logvar, z, model.logits, model.means, model.log_vars)?;
        rec_acc = Some(match rec_acc {
            Some(a) => g.add(a, rec)?,
            None => rec,
        });
        kl_acc = Some(match kl_acc {
            Some(a) => g.add(a, kl)?,
            None => kl,
        });
    }
    let rec = g.scale(rec_acc.expect("non-empty"), inv_l);
    let kl = g.scale(kl_acc.expect("non-empty"), inv_l);
    let per_sample = g.add(rec, kl)?;
    let total = g.mean(per_sample);
    let reconstruction = g.mean(rec);
    let kl = g.mean(kl);
    for (v, what) in [(reconstruction, "reconstruction term"), (kl, "KL term"), (total, "loss")] {
        if !g.value(v).all_finite() {
            return Err(Error::Numerical(format!("{what} is not finite")));
        }
    }
    Ok(LossVars {
        total,
        reconstruction,
        kl,
    })
}

/// Loss value on a batch with `samples` fresh noise draws.
pub fn elbo_value<R: Rng + ?Sized>(model: &GmvaeModel, x: &Tensor, samples: usize, rng: &mut R) -> Result<f64> {
    let n = x.shape().first().copied().unwrap_or(0);
    let eps: Vec<Tensor> = (0..samples).map(|_| sample_noise(n, rng)).collect();
    let mut g = Graph::new();
    let bound = BoundModel::bind(model, &mut g, false);
    let xv = g.constant(x.clone());
    let l = elbo_loss(&mut g, &bound, xv, &eps)?;
    g.value(l.total).item()
}

/// Evaluate the per-sample KL part for given posterior parameters and codes.
pub fn kl_portion(model: &GmvaeModel, mu: &Tensor, logvar: &Tensor, z: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let m = &model.mixture;
    let (lg, me, lv) = (g.constant(m.logits.clone()), g.constant(m.means.clone()), g.constant(m.log_vars.clone()));
    let (mv, lvv, zv) = (g.constant(mu.clone()), g.constant(logvar.clone()), g.constant(z.clone()));
    let kl = mixture_kl(&mut g, mv, lvv, zv, lg, me, lv)?;
    Ok(g.value(kl).data().to_vec())
}
