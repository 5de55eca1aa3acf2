use crate::error::{contract_err, dim_err, Error, Result};

use super::Tensor;

/// Adam hyperparameters. Weight decay is an additive L2 term on the
/// gradient, applied only to slots flagged for decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Moment accumulators for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    decay: Vec<bool>,
    step: u64,
}

impl AdamState {
    /// `params` fixes the slot shapes; `decay[i]` enables weight decay for slot `i`.
    pub fn new(config: AdamConfig, params: &[Tensor], decay: Vec<bool>) -> Result<Self> {
        if decay.len() != params.len() {
            return Err(contract_err!("decay mask has {} slots for {} params", decay.len(), params.len()));
        }
        Ok(AdamState {
            config,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            decay,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every parameter in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(dim_err!(
                "adam: {} params / {} grads for {} slots",
                params.len(),
                grads.len(),
                self.first.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.shape() != p.shape() {
                return Err(dim_err!("adam slot {i}: param {:?} grad {:?}", p.shape(), g.shape()));
            }
            if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("adam slot {i}: non-finite gradient at element {j}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let wd = if self.decay[i] { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, &gr), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gr = gr + wd * *w;
                *m = c.beta1 * *m + (1.0 - c.beta1) * gr;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gr * gr;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= c.learning_rate * mh / (vh.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}
