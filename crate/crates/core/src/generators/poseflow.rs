//! The pose flow: a single-class flow over head-pose coefficients with a
//! standard normal latent and audio plus pose-history context.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::Objective;
use crate::context::{
    CoeffSequence, ContextConfig, ContextEncoder, EncoderKind, RawBuilder, RawContext, Variant,
};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowStack, LinearInit};
use crate::latent::gaussian_logpdf_tape;
use crate::numerics::{Bound, ParamSet, Tape, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFlowConfig {
    pub dim: usize,
    pub steps: usize,
    pub hidden: usize,
    pub context: ContextConfig,
}

impl Default for PoseFlowConfig {
    fn default() -> Self {
        Self {
            dim: 6,
            steps: 4,
            hidden: 64,
            context: ContextConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoseBatch<T> {
    pub x: Array2<T>,
    pub raw: RawContext<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseFlowModel<T> {
    pub config: PoseFlowConfig,
    pub encoder: ContextEncoder,
    pub flow: FlowStack,
    pub params: ParamSet<T>,
    pub trained_steps: u64,
}

impl<T: Scalar> PoseFlowModel<T> {
    pub fn skeleton(config: PoseFlowConfig) -> Result<Self> {
        let encoder = ContextEncoder::new(
            "pose.enc",
            Variant::Pose,
            EncoderKind::Learned,
            config.context,
            config.dim,
            1,
        )?;
        let flow = FlowStack::new(
            "pose.flow",
            FlowConfig {
                dim: config.dim,
                ctx_dim: encoder.ctx_dim(),
                classes: 1,
                steps: config.steps,
                hidden: config.hidden,
            },
        )?;
        Ok(Self {
            config,
            encoder,
            flow,
            params: ParamSet::new(),
            trained_steps: 0,
        })
    }

    pub fn new(config: PoseFlowConfig, seed: u64) -> Result<Self> {
        Self::with_linear_init(config, seed, LinearInit::Rotation)
    }

    pub fn with_linear_init(config: PoseFlowConfig, seed: u64, linear: LinearInit) -> Result<Self> {
        let mut model = Self::skeleton(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.encoder.init(&mut model.params, &mut rng);
        model.flow.init(&mut model.params, &mut rng, linear)?;
        Ok(model)
    }

    pub fn batch(&self, data: &[CoeffSequence], items: &[(usize, usize)]) -> Result<PoseBatch<T>> {
        let mut rb = RawBuilder::new(Variant::Pose, self.config.dim, &self.config.context);
        let mut x = Array2::zeros((items.len(), self.config.dim));
        for (r, &(s, t)) in items.iter().enumerate() {
            let seq = &data[s];
            if seq.pose.ncols() != self.config.dim {
                return Err(Error::data(format!(
                    "pose width {} != {}",
                    seq.pose.ncols(),
                    self.config.dim
                )));
            }
            self.encoder.push_frame(&mut rb, seq, t);
            x.row_mut(r).assign(&seq.pose.row(t).mapv(T::c));
        }
        Ok(PoseBatch {
            x,
            raw: rb.finish(),
        })
    }

    /// Mean negative log-likelihood on the tape.
    pub fn loss_tape(&self, b: &Bound<'_, T>, batch: &PoseBatch<T>) -> Result<Var> {
        let g = b.tape;
        let rows = batch.x.nrows();
        let classes = vec![0; rows];
        let ctx = self.encoder.encode(b, &batch.raw, &vec![false; rows])?;
        let (z, logdet) = self
            .flow
            .forward(b, g.constant(batch.x.clone()), ctx, &classes)?;
        let loss = g.neg(g.mean_all(g.add(gaussian_logpdf_tape(g, z), logdet)));
        if !g.scalar(loss).is_finite() {
            return Err(Error::numeric("non-finite pose flow loss"));
        }
        Ok(loss)
    }

    pub fn loss(&self, batch: &PoseBatch<T>) -> Result<T> {
        let g = Tape::new();
        let b = Bound::new(&g, &self.params);
        Ok(g.scalar(self.loss_tape(&b, batch)?))
    }

    pub fn dataset_loss(&self, data: &[CoeffSequence]) -> Result<f64> {
        let items = super::expflow::all_frames(data);
        let mut total = 0.0;
        for chunk in items.chunks(256) {
            total += self.loss(&self.batch(data, chunk)?)?.f64() * chunk.len() as f64;
        }
        Ok(total / items.len() as f64)
    }

    pub fn loss_and_grads(
        &self,
        params: &ParamSet<T>,
        batch: &PoseBatch<T>,
    ) -> Result<(Vec<(String, f64)>, ParamSet<T>)> {
        let g = Tape::new();
        let b = Bound::new(&g, params);
        let loss = self.loss_tape(&b, batch)?;
        let grads = g.backward(loss);
        let v = g.scalar(loss).f64();
        Ok((
            vec![("total".to_string(), v), ("nll".to_string(), v)],
            b.grads(&grads),
        ))
    }
}

pub struct PoseFlowObjective<T> {
    pub model: PoseFlowModel<T>,
    pub data: Vec<CoeffSequence>,
    frames: Vec<(usize, usize)>,
}

impl<T: Scalar> PoseFlowObjective<T> {
    pub fn new(model: PoseFlowModel<T>, data: Vec<CoeffSequence>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::data("empty training set"));
        }
        for s in &data {
            s.validate()?;
        }
        let frames = super::expflow::all_frames(&data);
        Ok(Self {
            model,
            data,
            frames,
        })
    }
}

impl<T: Scalar> Objective<T> for PoseFlowObjective<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.model.params
    }

    fn minibatch(
        &self,
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<(String, f64)>, ParamSet<T>)> {
        let items: Vec<(usize, usize)> = (0..batch)
            .map(|_| self.frames[rng.random_range(0..self.frames.len())])
            .collect();
        let pb = self.model.batch(&self.data, &items)?;
        self.model.loss_and_grads(&self.model.params, &pb)
    }

    fn record_step(&mut self, step: u64) {
        self.model.trained_steps = step;
    }
}
