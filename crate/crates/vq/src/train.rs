//! Minibatch objectives for the autoencoder and the generator.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use talkflow_core::generators::Objective;
use talkflow_core::numerics::ParamSet;
use talkflow_core::{Error, Result, Scalar};

use crate::autoencoder::PatchAutoencoder;
use crate::patches::{stack_images, PatchPair};
use crate::vqig::{VqigBatch, VqigModel};

pub struct AeObjective<T> {
    pub model: PatchAutoencoder<T>,
    pub images: Vec<Array2<f64>>,
}

impl<T: Scalar> AeObjective<T> {
    /// Seeds the codebook from encoder cells of the corpus unless told otherwise.
    pub fn new(
        mut model: PatchAutoencoder<T>,
        images: Vec<Array2<f64>>,
        data_init: Option<u64>,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::data("empty patch corpus"));
        }
        if let Some(seed) = data_init {
            let probe: Vec<Array2<f64>> = images.iter().take(64).cloned().collect();
            model.init_codebook_from(&stack_images(&probe).mapv(T::c), seed)?;
        }
        Ok(Self { model, images })
    }

    pub fn stacked(&self, idx: &[usize]) -> Array2<T> {
        let imgs: Vec<Array2<f64>> = idx.iter().map(|&i| self.images[i].clone()).collect();
        stack_images(&imgs).mapv(T::c)
    }

    pub fn all(&self) -> Array2<T> {
        stack_images(&self.images).mapv(T::c)
    }
}

impl<T: Scalar> Objective<T> for AeObjective<T> {
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
        let idx: Vec<usize> = (0..batch)
            .map(|_| rng.random_range(0..self.images.len()))
            .collect();
        let (terms, grads) =
            self.model
                .loss_and_grads(&self.model.params, &self.stacked(&idx), None)?;
        Ok((terms.named(), grads))
    }
}

pub struct VqigObjective<T> {
    pub model: VqigModel<T>,
    pub pairs: Vec<PatchPair>,
    pub step: u64,
}

impl<T: Scalar> VqigObjective<T> {
    pub fn new(model: VqigModel<T>, pairs: Vec<PatchPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::data("empty training pair set"));
        }
        Ok(Self {
            model,
            pairs,
            step: 0,
        })
    }
}

impl<T: Scalar> Objective<T> for VqigObjective<T> {
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
        let idx: Vec<usize> = (0..batch)
            .map(|_| rng.random_range(0..self.pairs.len()))
            .collect();
        let chosen: Vec<&PatchPair> = idx.iter().map(|&i| &self.pairs[i]).collect();
        let vb = VqigBatch::new(&self.model, &chosen)?;
        let image_weight = self.model.image_weight(self.step);
        let (terms, grads) =
            self.model
                .loss_and_grads(&self.model.params, &vb, image_weight, None)?;
        Ok((terms.named(), grads))
    }

    fn record_step(&mut self, step: u64) {
        self.step = step;
        self.model.trained_steps = step;
    }
}
