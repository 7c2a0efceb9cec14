//! The expression flow: class-conditional likelihood of coefficient frames
//! under a Student's-t mixture, plus the frame-delta consistency term.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::train::Objective;
use crate::context::{
    dropout_mask, CoeffSequence, ContextConfig, ContextEncoder, EncoderKind, RawBuilder,
    RawContext, Variant,
};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowStack, LinearInit};
use crate::latent::{class_logpdf_tape, random_means, Smm};
use crate::numerics::{Bound, ParamSet, Tape, Var};
use crate::scalar::Scalar;

pub const MEANS: &str = "smm.mu";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpFlowConfig {
    pub classes: usize,
    pub dim: usize,
    pub steps: usize,
    pub hidden: usize,
    pub nu: f64,
    pub context: ContextConfig,
    /// Probability of zeroing the previous-frame context of a training row.
    pub dropout: f64,
    pub lambda_con: f64,
    /// Frame pairs per minibatch used for the consistency term.
    pub consistency_pairs: usize,
    pub freeze_means: bool,
}

impl Default for ExpFlowConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            dim: 64,
            steps: 8,
            hidden: 128,
            nu: 2.0,
            context: ContextConfig::default(),
            dropout: 0.25,
            lambda_con: 0.1,
            consistency_pairs: 16,
            freeze_means: false,
        }
    }
}

impl ExpFlowConfig {
    pub fn validate(&self) -> Result<()> {
        self.context.validate()?;
        if self.classes == 0 {
            return Err(Error::config("need at least one emotion class"));
        }
        if !(self.nu > 0.0) {
            return Err(Error::config("nu must be positive"));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1]"));
        }
        if self.lambda_con < 0.0 {
            return Err(Error::config("lambda_con must be nonnegative"));
        }
        Ok(())
    }
}

/// Frames with their raw contexts, ready for the tape.
#[derive(Debug, Clone)]
pub struct FrameBatch<T> {
    pub x: Array2<T>,
    pub raw: RawContext<T>,
    pub classes: Vec<usize>,
    pub dropped: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpFlowModel<T> {
    pub config: ExpFlowConfig,
    pub encoder: ContextEncoder,
    pub flow: FlowStack,
    pub params: ParamSet<T>,
    pub trained_steps: u64,
}

impl<T: Scalar> ExpFlowModel<T> {
    /// Structure only; `params` is empty.
    pub fn skeleton(config: ExpFlowConfig) -> Result<Self> {
        config.validate()?;
        let encoder = ContextEncoder::new(
            "enc",
            Variant::Expression,
            EncoderKind::Learned,
            config.context,
            config.dim,
            config.classes,
        )?;
        let flow = FlowStack::new(
            "flow",
            FlowConfig {
                dim: config.dim,
                ctx_dim: encoder.ctx_dim(),
                classes: config.classes,
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

    pub fn new(config: ExpFlowConfig, seed: u64) -> Result<Self> {
        Self::with_linear_init(config, seed, LinearInit::Rotation)
    }

    pub fn with_linear_init(config: ExpFlowConfig, seed: u64, linear: LinearInit) -> Result<Self> {
        let mut model = Self::skeleton(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.encoder.init(&mut model.params, &mut rng);
        model.flow.init(&mut model.params, &mut rng, linear)?;
        model
            .params
            .insert(MEANS, random_means(config.classes, config.dim, &mut rng));
        model.params.set_trainable(MEANS, !config.freeze_means)?;
        Ok(model)
    }

    pub fn smm(&self) -> Smm<T> {
        Smm {
            means: self.params.expect(MEANS).clone(),
            nu: self.config.nu,
        }
    }

    /// Teacher-forced frames `items = [(sequence, t)]`.
    pub fn batch(
        &self,
        data: &[CoeffSequence],
        items: &[(usize, usize)],
        dropped: Vec<bool>,
    ) -> FrameBatch<T> {
        let mut rb = RawBuilder::new(Variant::Expression, self.config.dim, &self.config.context);
        let mut x = Array2::zeros((items.len(), self.config.dim));
        let mut classes = Vec::with_capacity(items.len());
        for (r, &(s, t)) in items.iter().enumerate() {
            let seq = &data[s];
            self.encoder.push_frame(&mut rb, seq, t);
            x.row_mut(r).assign(&seq.coeffs.row(t).mapv(T::c));
            classes.push(seq.class);
        }
        FrameBatch {
            x,
            raw: rb.finish(),
            classes,
            dropped,
        }
    }

    pub fn context<'t>(&self, b: &Bound<'t, T>, batch: &FrameBatch<T>) -> Result<Var> {
        self.encoder.encode(b, &batch.raw, &batch.dropped)
    }

    /// Per-row `(z, log p(z|e), logdet)` on the tape.
    pub fn forward_terms(
        &self,
        b: &Bound<'_, T>,
        batch: &FrameBatch<T>,
    ) -> Result<(Var, Var, Var)> {
        let g = b.tape;
        let ctx = self.context(b, batch)?;
        let (z, logdet) = self
            .flow
            .forward(b, g.constant(batch.x.clone()), ctx, &batch.classes)?;
        let logp = class_logpdf_tape(g, z, b.p(MEANS), &batch.classes, self.config.nu)?;
        Ok((z, logp, logdet))
    }

    /// Mean negative log-likelihood of the batch, as a `(1, 1)` tape value.
    pub fn nll_tape(&self, b: &Bound<'_, T>, batch: &FrameBatch<T>) -> Result<Var> {
        let g = b.tape;
        let (_, logp, logdet) = self.forward_terms(b, batch)?;
        let nll = g.neg(g.mean_all(g.add(logp, logdet)));
        if !g.scalar(nll).is_finite() {
            return Err(self.locate_non_finite(b.params(), batch));
        }
        Ok(nll)
    }

    fn locate_non_finite(&self, params: &ParamSet<T>, batch: &FrameBatch<T>) -> Error {
        let g = Tape::new();
        let b = Bound::new(&g, params);
        let ctx = match self.context(&b, batch) {
            Ok(c) => c,
            Err(e) => return e,
        };
        let mut h = g.constant(batch.x.clone());
        for k in 0..self.flow.steps.len() {
            match self
                .flow
                .forward_range(&b, h, ctx, &batch.classes, k..k + 1)
            {
                Ok((next, ld)) => {
                    let bad = |v: Var| g.with_value(v, |a| a.iter().any(|x| !x.is_finite()));
                    if bad(next) || bad(ld) {
                        return Error::numeric(format!("non-finite value in flow step {k}"));
                    }
                    h = next;
                }
                Err(e) => return e,
            }
        }
        Error::numeric("non-finite latent log-density")
    }

    /// Mean NLL evaluated without recording gradients.
    pub fn nll_loss(&self, batch: &FrameBatch<T>) -> Result<T> {
        let g = Tape::new();
        let b = Bound::new(&g, &self.params);
        Ok(g.scalar(self.nll_tape(&b, batch)?))
    }

    /// Held-out NLL over every frame of `data`, full context, no dropout.
    pub fn dataset_nll(&self, data: &[CoeffSequence]) -> Result<f64> {
        let items: Vec<(usize, usize)> = data
            .iter()
            .enumerate()
            .flat_map(|(s, seq)| (0..seq.len()).map(move |t| (s, t)))
            .collect();
        let mut total = 0.0;
        for chunk in items.chunks(256) {
            let batch = self.batch(data, chunk, vec![false; chunk.len()]);
            total += self.nll_loss(&batch)?.f64() * chunk.len() as f64;
        }
        Ok(total / items.len() as f64)
    }

    /// Latents of the given frames under teacher-forced contexts.
    pub fn encode_frames(
        &self,
        data: &[CoeffSequence],
        items: &[(usize, usize)],
    ) -> Result<Array2<T>> {
        let mut out = Array2::zeros((items.len(), self.config.dim));
        let mut at = 0;
        for chunk in items.chunks(256) {
            let batch = self.batch(data, chunk, vec![false; chunk.len()]);
            let g = Tape::new();
            let b = Bound::new(&g, &self.params);
            let ctx = self.context(&b, &batch)?;
            let (z, _) = self
                .flow
                .forward(&b, g.constant(batch.x.clone()), ctx, &batch.classes)?;
            g.with_value(z, |v| {
                out.slice_mut(ndarray::s![at..at + chunk.len(), ..])
                    .assign(v)
            });
            at += chunk.len();
        }
        Ok(out)
    }

    /// Consistency term on the tape for frame pairs `(s, t)` with `t ≥ 1`.
    /// Both frames of a pair are generated from one latent draw `noise`
    /// added to the class mean, under teacher-forced contexts.
    pub fn consistency_tape(
        &self,
        b: &Bound<'_, T>,
        data: &[CoeffSequence],
        pairs: &[(usize, usize)],
        noise: &Array2<T>,
    ) -> Result<Var> {
        let g = b.tape;
        let prev_items: Vec<(usize, usize)> = pairs.iter().map(|&(s, t)| (s, t - 1)).collect();
        let prev = self.batch(data, &prev_items, vec![false; pairs.len()]);
        let cur = self.batch(data, pairs, vec![false; pairs.len()]);
        let z = g.add(
            g.gather_rows(b.p(MEANS), &cur.classes),
            g.constant(noise.clone()),
        );
        let gen_prev = self
            .flow
            .inverse(b, z, self.context(b, &prev)?, &prev.classes)?;
        let gen_cur = self
            .flow
            .inverse(b, z, self.context(b, &cur)?, &cur.classes)?;
        let gt_delta = g.constant(&cur.x - &prev.x);
        let gen_delta = g.sub(gen_cur, gen_prev);
        Ok(g.mean_all(g.abs(g.sub(gt_delta, gen_delta))))
    }

    /// `(ν/u)^{1/2}·g` draws, one row per pair.
    pub fn latent_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Array2<T> {
        let chi = ChiSquared::new(self.config.nu).expect("validated nu");
        let mut out = Array2::zeros((rows, self.config.dim));
        for mut row in out.rows_mut() {
            let u: f64 = chi.sample(rng);
            let k = (self.config.nu / u).sqrt();
            row.mapv_inplace(|_| T::c(k * rng.sample::<f64, _>(StandardNormal)));
        }
        out
    }

    /// The total training loss and its gradient for a fixed batch.
    pub fn loss_and_grads(
        &self,
        params: &ParamSet<T>,
        data: &[CoeffSequence],
        batch: &FrameBatch<T>,
        pairs: &[(usize, usize)],
        noise: &Array2<T>,
    ) -> Result<(Vec<(String, f64)>, ParamSet<T>)> {
        let g = Tape::new();
        let b = Bound::new(&g, params);
        let nll = self.nll_tape(&b, batch)?;
        let mut terms = vec![("nll".to_string(), g.scalar(nll).f64())];
        let mut total = nll;
        if self.config.lambda_con > 0.0 && !pairs.is_empty() {
            let con = self.consistency_tape(&b, data, pairs, noise)?;
            terms.push(("consistency".to_string(), g.scalar(con).f64()));
            total = g.add(total, g.scale(con, T::c(self.config.lambda_con)));
        }
        terms.insert(0, ("total".to_string(), g.scalar(total).f64()));
        let grads = g.backward(total);
        Ok((terms, b.grads(&grads)))
    }
}

/// Mean over `t ≥ 1` and coordinates of `|Δgt − Δgen|`.
pub fn consistency_loss(gt: ArrayView2<f64>, generated: ArrayView2<f64>) -> Result<f64> {
    if gt.dim() != generated.dim() {
        return Err(Error::argument(format!(
            "consistency_loss shapes {:?} vs {:?}",
            gt.dim(),
            generated.dim()
        )));
    }
    let (t, d) = gt.dim();
    if t < 2 {
        return Err(Error::argument(
            "consistency_loss needs at least two frames",
        ));
    }
    let mut sum = 0.0;
    for i in 1..t {
        for j in 0..d {
            let a = gt[[i, j]] - gt[[i - 1, j]];
            let b = generated[[i, j]] - generated[[i - 1, j]];
            sum += (a - b).abs();
        }
    }
    Ok(sum / ((t - 1) * d) as f64)
}

/// Every `(sequence, frame)` index of a dataset.
pub fn all_frames(data: &[CoeffSequence]) -> Vec<(usize, usize)> {
    data.iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..seq.len()).map(move |t| (s, t)))
        .collect()
}

/// [`ExpFlowModel`] bound to its training set.
pub struct ExpFlowObjective<T> {
    pub model: ExpFlowModel<T>,
    pub data: Vec<CoeffSequence>,
    frames: Vec<(usize, usize)>,
    pair_frames: Vec<(usize, usize)>,
}

impl<T: Scalar> ExpFlowObjective<T> {
    pub fn new(model: ExpFlowModel<T>, data: Vec<CoeffSequence>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::data("empty training set"));
        }
        let mut seen = vec![false; model.config.classes];
        for s in &data {
            s.validate()?;
            if s.class >= model.config.classes || s.coeffs.ncols() != model.config.dim {
                return Err(Error::data(
                    "training sequence does not match the model configuration",
                ));
            }
            seen[s.class] = true;
        }
        if seen.iter().any(|&x| !x) {
            return Err(Error::data(
                "every emotion class must appear in the training set",
            ));
        }
        let frames = all_frames(&data);
        let pair_frames = frames.iter().copied().filter(|&(_, t)| t >= 1).collect();
        Ok(Self {
            model,
            data,
            frames,
            pair_frames,
        })
    }

    /// Draws a minibatch: frames, dropout mask, consistency pairs and their latent noise.
    pub fn draw(
        &self,
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(FrameBatch<T>, Vec<(usize, usize)>, Array2<T>)> {
        let items: Vec<(usize, usize)> = (0..batch)
            .map(|_| self.frames[rng.random_range(0..self.frames.len())])
            .collect();
        let dropped = dropout_mask(batch, self.model.config.dropout, rng)?;
        let fb = self.model.batch(&self.data, &items, dropped);
        let n_pairs = if self.model.config.lambda_con > 0.0 {
            self.model.config.consistency_pairs
        } else {
            0
        };
        let pairs: Vec<(usize, usize)> = (0..n_pairs)
            .map(|_| self.pair_frames[rng.random_range(0..self.pair_frames.len())])
            .collect();
        let noise = self.model.latent_noise(n_pairs, rng);
        Ok((fb, pairs, noise))
    }
}

impl<T: Scalar> Objective<T> for ExpFlowObjective<T> {
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
        let (fb, pairs, noise) = self.draw(batch, rng)?;
        self.model
            .loss_and_grads(&self.model.params, &self.data, &fb, &pairs, &noise)
    }

    fn record_step(&mut self, step: u64) {
        self.model.trained_steps = step;
    }
}
