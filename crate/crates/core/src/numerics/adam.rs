use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adaptive-moment hyperparameters. Defaults: lr 1e-3, β₁ 0.9, β₂ 0.999, ε 1e-8.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// Applies one bias-corrected update in place. Non-trainable entries are skipped.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        params.same_shapes(grads)?;
        params.same_shapes(&self.m)?;
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::numeric(format!("non-finite gradient for {name}")));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (one, lr, eps) = (T::one(), T::c(c.lr), T::c(c.eps));
        let bc1 = one - T::c(c.beta1.powi(self.step as i32));
        let bc2 = one - T::c(c.beta2.powi(self.step as i32));
        let names: Vec<String> = params.trainable_names().map(str::to_owned).collect();
        for name in names {
            let g = grads.expect(&name);
            let m = self.m.get_mut(&name).unwrap();
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = b1 * *m + (one - b1) * g;
            });
            let v = self.v.get_mut(&name).unwrap();
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = b2 * *v + (one - b2) * g * g;
            });
            let (m, v) = (self.m.expect(&name), self.v.expect(&name));
            let p = params.get_mut(&name).unwrap();
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                let mh = m / bc1;
                let vh = v / bc2;
                *p = *p - lr * mh / (vh.sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// Functional form: returns the updated parameters and optimizer state.
pub fn adam_step<T: Scalar>(
    params: &ParamSet<T>,
    grads: &ParamSet<T>,
    state: &OptimizerState<T>,
) -> Result<(ParamSet<T>, OptimizerState<T>)> {
    let mut p = params.clone();
    let mut s = state.clone();
    s.update(&mut p, grads)?;
    Ok((p, s))
}
