use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Coupled decay: `decay · w` is added to the gradient before the moment
    /// updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TensorError::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(TensorError::Config(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(TensorError::Config("eps must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// First and second moment buffers of one parameter.
#[derive(Clone, Debug, Default)]
pub struct Moments<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
}

/// One bias-corrected ADAM update of `param` in place. `step` counts from 1.
pub fn adam_update<F: Real>(
    param: &mut [F],
    grad: &[F],
    state: &mut Moments<F>,
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    if grad.len() != param.len() {
        return Err(TensorError::Dimension {
            op: "adam_update",
            detail: format!("{} gradients for {} values", grad.len(), param.len()),
        });
    }
    if state.m.len() != param.len() {
        state.m = vec![F::zero(); param.len()];
        state.v = vec![F::zero(); param.len()];
    }
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let (fb1, fb2) = (F::of(b1), F::of(b2));
    let (lr, eps, wd) = (F::of(cfg.lr), F::of(cfg.eps), F::of(cfg.weight_decay));
    let (fc1, fc2) = (F::of(c1), F::of(c2));
    for i in 0..param.len() {
        let g = grad[i] + wd * param[i];
        state.m[i] = fb1 * state.m[i] + (F::one() - fb1) * g;
        state.v[i] = fb2 * state.v[i] + (F::one() - fb2) * g * g;
        let m_hat = state.m[i] / fc1;
        let v_hat = state.v[i] / fc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// ADAM over every trainable parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub config: AdamConfig,
    step: u64,
    state: HashMap<ParamId, Moments<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            step: 0,
            state: HashMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments<F>> {
        self.state.get(&id)
    }

    /// Applies one update using the gradients accumulated in `store`; missing
    /// gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        self.step += 1;
        for id in store.trainable_ids() {
            let p = store.get_mut(id);
            let grad = match &p.grad {
                Some(g) => g.data().to_vec(),
                None => vec![F::zero(); p.tensor.numel()],
            };
            let state = self.state.entry(id).or_default();
            adam_update(p.tensor.data_mut(), &grad, state, self.step, &self.config)?;
        }
        Ok(())
    }
}
