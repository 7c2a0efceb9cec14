//! Autoregressive generation: expression rollouts, emotion transfer and pose rollouts.

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bank::LatentBank;
use super::expflow::ExpFlowModel;
use super::poseflow::PoseFlowModel;
use crate::context::{previous_frames, AudioFeatureProvider, CoeffSequence, RawBuilder, Variant};
use crate::error::{Error, Result};
use crate::latent::sample_gaussian;
use crate::numerics::{Bound, Tape};
use crate::scalar::Scalar;

/// Where each frame's latent comes from.
#[derive(Debug, Clone, Copy)]
pub enum SamplingMode<'a> {
    /// A fresh draw from the target class component.
    Random,
    /// Latents of a reference sequence under its own contexts.
    Transfer(&'a CoeffSequence),
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutOptions<'a> {
    pub mode: SamplingMode<'a>,
    /// Snap sampled latents onto the bank before decoding. Ignored for transfer latents.
    pub project: bool,
    pub seed: u64,
    pub length: usize,
}

impl RolloutOptions<'_> {
    pub fn random(seed: u64, length: usize) -> Self {
        Self {
            mode: SamplingMode::Random,
            project: true,
            seed,
            length,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub frames: Array2<f64>,
    pub latents: Array2<f64>,
    pub class: usize,
    /// Set when the generating model has never taken an optimizer step.
    pub untrained: bool,
}

fn check_audio(audio: &dyn AudioFeatureProvider, length: usize) -> Result<()> {
    if length == 0 {
        return Err(Error::argument("rollout length must be positive"));
    }
    if audio.len() < length {
        return Err(Error::argument(format!(
            "audio has {} frames, rollout needs {length}",
            audio.len()
        )));
    }
    Ok(())
}

/// Generates `options.length` expression frames of class `class`, starting
/// from the source frame `beta0` and driven by `audio`.
pub fn rollout_expression<T: Scalar>(
    model: &ExpFlowModel<T>,
    beta0: ArrayView1<f64>,
    audio: &dyn AudioFeatureProvider,
    class: usize,
    options: &RolloutOptions<'_>,
    bank: Option<&LatentBank<T>>,
) -> Result<Rollout> {
    let cfg = &model.config;
    check_audio(audio, options.length)?;
    if beta0.len() != cfg.dim {
        return Err(Error::argument(format!(
            "source frame width {} != {}",
            beta0.len(),
            cfg.dim
        )));
    }
    crate::flow::check_classes(&[class], cfg.classes)?;
    let (latents, class) = match options.mode {
        SamplingMode::Random => {
            let smm = model.smm();
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            let mut z = Array2::zeros((options.length, cfg.dim));
            for mut row in z.rows_mut() {
                let mut s = smm.sample_class(class, &mut rng)?;
                if options.project {
                    if let Some(bank) = bank {
                        s = bank.project(s.view())?;
                    }
                }
                row.assign(&s);
            }
            (z, class)
        }
        SamplingMode::Transfer(reference) => {
            reference.validate()?;
            if reference.len() < options.length {
                return Err(Error::argument(format!(
                    "reference has {} frames, transfer needs {}",
                    reference.len(),
                    options.length
                )));
            }
            let items: Vec<(usize, usize)> = (0..options.length).map(|t| (0, t)).collect();
            let z = model.encode_frames(std::slice::from_ref(reference), &items)?;
            (z, reference.class)
        }
    };

    let mut frames = Array2::<f64>::zeros((options.length, cfg.dim));
    for t in 0..options.length {
        let window = audio.window(t, cfg.context.audio_radius);
        let mut rb = RawBuilder::new(Variant::Expression, cfg.dim, &cfg.context);
        {
            let prev = previous_frames(&frames, t, cfg.context.tau, beta0);
            rb.push(beta0, &window, &prev, class);
        }
        let raw = rb.finish::<T>();
        let g = Tape::new();
        let b = Bound::new(&g, &model.params);
        let ctx = model.encoder.encode(&b, &raw, &[false])?;
        let z = g.constant(latents.slice(ndarray::s![t..t + 1, ..]).to_owned());
        let x = model.flow.inverse(&b, z, ctx, &[class])?;
        let row = g.with_value(x, |v| v.row(0).mapv(|a| a.f64()));
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite generated frame {t}")));
        }
        frames.row_mut(t).assign(&row);
    }
    Ok(Rollout {
        frames,
        latents: latents.mapv(|v| v.f64()),
        class,
        untrained: model.trained_steps == 0,
    })
}

/// Replays the reference's latents under the target's source frame and audio.
pub fn emotion_transfer<T: Scalar>(
    model: &ExpFlowModel<T>,
    reference: &CoeffSequence,
    beta0: ArrayView1<f64>,
    audio: &dyn AudioFeatureProvider,
    seed: u64,
    length: usize,
) -> Result<Rollout> {
    let options = RolloutOptions {
        mode: SamplingMode::Transfer(reference),
        project: false,
        seed,
        length,
    };
    rollout_expression(model, beta0, audio, reference.class, &options, None)
}

/// Generates a head-pose track of `length` frames from `audio`. The history
/// before the first frame reads as zeros.
pub fn rollout_pose<T: Scalar>(
    model: &PoseFlowModel<T>,
    audio: &dyn AudioFeatureProvider,
    seed: u64,
    length: usize,
) -> Result<Rollout> {
    let cfg = &model.config;
    check_audio(audio, length)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zero = Array1::<f64>::zeros(cfg.dim);
    let mut frames = Array2::<f64>::zeros((length, cfg.dim));
    let mut latents = Array2::<f64>::zeros((length, cfg.dim));
    for t in 0..length {
        let window = audio.window(t, cfg.context.audio_radius);
        let mut rb = RawBuilder::new(Variant::Pose, cfg.dim, &cfg.context);
        {
            let prev = previous_frames(&frames, t, cfg.context.tau, zero.view());
            rb.push(zero.view(), &window, &prev, 0);
        }
        let raw = rb.finish::<T>();
        let z: Array1<T> = sample_gaussian(cfg.dim, &mut rng);
        latents.row_mut(t).assign(&z.mapv(|v| v.f64()));
        let g = Tape::new();
        let b = Bound::new(&g, &model.params);
        let ctx = model.encoder.encode(&b, &raw, &[false])?;
        let zv = g.constant(z.insert_axis(ndarray::Axis(0)));
        let x = model.flow.inverse(&b, zv, ctx, &[0])?;
        let row = g.with_value(x, |v| v.row(0).mapv(|a| a.f64()));
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite generated pose frame {t}"
            )));
        }
        frames.row_mut(t).assign(&row);
    }
    Ok(Rollout {
        frames,
        latents,
        class: 0,
        untrained: model.trained_steps == 0,
    })
}
