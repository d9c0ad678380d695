//! Bias-corrected Adam.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_hat: f64,
}

impl AdamConfig {
    /// Adversarial training defaults: `alpha = 1e-4, beta1 = 0, beta2 = 0.9`.
    pub const ADVERSARIAL: AdamConfig = AdamConfig {
        alpha: 1e-4,
        beta1: 0.0,
        beta2: 0.9,
        epsilon_hat: 1e-8,
    };

    /// Downstream classifier defaults: `alpha = 1e-3, beta1 = 0.9, beta2 = 0.99`.
    pub const CLASSIFIER: AdamConfig = AdamConfig {
        alpha: 1e-3,
        beta1: 0.9,
        beta2: 0.99,
        epsilon_hat: 1e-8,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon_hat > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Float> {
    pub step_count: u64,
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
}

impl<T: Float> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        AdamState {
            step_count: 0,
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
        }
    }
}

/// One Adam update of `param` in place.
pub fn adam_step<T: Float>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.first_moment.shape() {
        return Err(Error::shape(
            "adam_step",
            format!("param {:?}, grad {:?}", param.shape(), grad.shape()),
        ));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let c1 = T::of(1.0 / (1.0 - cfg.beta1.powi(t)));
    let c2 = T::of(1.0 / (1.0 - cfg.beta2.powi(t)));
    let alpha = T::of(cfg.alpha);
    let eps = T::of(cfg.epsilon_hat);
    let one = T::one();
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m * c1;
        let v_hat = *v * c2;
        *p = *p - alpha * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Float> {
    pub config: AdamConfig,
    pub states: IndexMap<String, AdamState<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParameterStore<T>) -> Self {
        let states = store
            .params()
            .map(|(k, v)| (k.to_string(), AdamState::new(v.shape())))
            .collect();
        Adam { config, states }
    }

    pub fn step(&mut self, store: &mut ParameterStore<T>, grads: &IndexMap<String, Tensor<T>>) -> Result<()> {
        for (name, param) in store.params_mut() {
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::Config(format!("no gradient for {name}")))?;
            if !grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            let state = self
                .states
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("no optimizer state for {name}")))?;
            adam_step(param, grad, state, &self.config)?;
        }
        Ok(())
    }
}
