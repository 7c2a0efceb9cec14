//! Resumable minibatch training loop shared by every model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, OptimizerState, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch: 64,
            adam: AdamConfig::default(),
            clip_norm: Some(50.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.adam.lr > 0.0)
            || !(0.0..1.0).contains(&self.adam.beta1)
            || !(0.0..1.0).contains(&self.adam.beta2)
        {
            return Err(Error::config("adam hyperparameters out of range"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }
}

/// Named loss terms of one minibatch; the first is the optimized total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub terms: Vec<(String, f64)>,
}

impl StepRecord {
    pub fn total(&self) -> f64 {
        self.terms[0].1
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|t| t.1)
    }
}

/// A model plus the data it trains on.
pub trait Objective<T: Scalar> {
    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
    /// Draws a minibatch from `rng`; returns the loss terms (total first)
    /// and the gradient of the total.
    fn minibatch(
        &self,
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<(String, f64)>, ParamSet<T>)>;
    fn record_step(&mut self, _step: u64) {}
}

/// Everything needed to continue training bit-identically.
pub struct Trainer<T: Scalar, O: Objective<T>> {
    pub objective: O,
    pub config: TrainConfig,
    pub optimizer: OptimizerState<T>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub history: Vec<StepRecord>,
}

impl<T: Scalar, O: Objective<T>> Trainer<T, O> {
    pub fn new(objective: O, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(objective.params(), config.adam);
        // stream 7 keeps the batch stream apart from initialization draws on the same seed
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(7);
        Ok(Self {
            objective,
            config,
            optimizer,
            rng,
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn step(&mut self) -> Result<&StepRecord> {
        let step = self.step;
        let (terms, mut grads) = self
            .objective
            .minibatch(self.config.batch, &mut self.rng)
            .map_err(|e| Error::Training {
                step: step as usize,
                message: e.to_string(),
            })?;
        if terms.iter().any(|(_, v)| !v.is_finite()) {
            return Err(Error::Training {
                step: step as usize,
                message: format!("non-finite loss {terms:?}"),
            });
        }
        if let Some(max) = self.config.clip_norm {
            clip_global_norm(&mut grads, max);
        }
        self.optimizer
            .update(self.objective.params_mut(), &grads)
            .map_err(|e| Error::Training {
                step: step as usize,
                message: e.to_string(),
            })?;
        self.step += 1;
        self.objective.record_step(self.step);
        self.history.push(StepRecord { step, terms });
        Ok(self.history.last().unwrap())
    }

    /// Runs until `config.steps` steps have been taken in total.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.config.steps {
            self.step()?;
        }
        Ok(())
    }

    pub fn run_for(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            self.step()?;
        }
        Ok(())
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max`; returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ParamSet<T>, max: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|v| v.f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let k = T::c(max / norm);
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}
