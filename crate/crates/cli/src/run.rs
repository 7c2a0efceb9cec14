//! A run directory: datasets, checkpoints and per-command output folders.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use talkflow_core::context::{load_dataset, CoeffSequence};
use talkflow_core::generators::{ExpFlowModel, LatentBank, Objective, PoseFlowModel, Trainer};
use talkflow_core::{Error, Result};
use talkflow_vq::autoencoder::PatchAutoencoder;
use talkflow_vq::patches::{pair_corpus, patch_corpus, PatchPair};
use talkflow_vq::VqigModel;

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{RunConfig, Stream};

pub const EXPFLOW: &str = "expflow";
pub const POSEFLOW: &str = "poseflow";
pub const CODEBOOK: &str = "codebook";
pub const VQIG: &str = "vqig";

#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
}

/// Appends to a command's `log.txt` and mirrors to standard error unless quiet.
pub struct Log {
    file: File,
    quiet: bool,
}

impl Log {
    pub fn line(&mut self, msg: &str) {
        let _ = writeln!(self.file, "{msg}");
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
}

impl Run {
    pub fn new(config: RunConfig, dir: impl Into<PathBuf>) -> Self {
        Self {
            config,
            dir: dir.into(),
        }
    }

    /// Default location `runs/<experiment>`.
    pub fn default_dir(config: &RunConfig) -> PathBuf {
        Path::new("runs").join(&config.experiment)
    }

    /// Creates (or clears) `<run>/<command>/` and writes the resolved config there.
    pub fn command_dir(&self, command: &str, quiet: bool) -> Result<(PathBuf, Log)> {
        let dir = self.dir.join(command);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("config.json"), self.config.to_json())?;
        let file = File::create(dir.join("log.txt"))?;
        Ok((dir, Log { file, quiet }))
    }

    pub fn seed(&self, stream: Stream) -> u64 {
        self.config.stream_seed(stream)
    }

    pub fn dataset_dir(&self, split: &str) -> PathBuf {
        self.dir.join("dataset").join(split)
    }

    fn dataset(&self, split: &str) -> Result<Vec<CoeffSequence>> {
        let dir = self.dataset_dir(split);
        if !dir.join("manifest.json").exists() {
            return Err(Error::data(format!(
                "no dataset at {} (run synth-data first)",
                dir.display()
            )));
        }
        Ok(load_dataset(&dir)?.1)
    }

    pub fn train_data(&self) -> Result<Vec<CoeffSequence>> {
        self.dataset("train")
    }

    pub fn held_data(&self) -> Result<Vec<CoeffSequence>> {
        self.dataset("held")
    }

    pub fn checkpoint_path(&self, kind: &str) -> PathBuf {
        self.dir.join(format!("{kind}.ckpt"))
    }

    pub fn bank_path(&self) -> PathBuf {
        self.dir.join("expflow.bank")
    }

    pub fn has(&self, kind: &str) -> bool {
        self.checkpoint_path(kind).exists()
    }

    pub fn checkpoint(&self, kind: &str) -> Result<(Checkpoint, RunConfig)> {
        let path = self.checkpoint_path(kind);
        if !path.exists() {
            return Err(Error::data(format!(
                "missing model {} (train it first)",
                path.display()
            )));
        }
        let ckpt = Checkpoint::load(&path)?;
        let cfg: RunConfig = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| Error::data(format!("checkpoint config: {e}")))?;
        Ok((ckpt, cfg))
    }

    /// Models are rebuilt from the configuration stored in their checkpoint.
    pub fn load_expflow(&self) -> Result<ExpFlowModel<f64>> {
        let (ckpt, cfg) = self.checkpoint(EXPFLOW)?;
        let mut model = ExpFlowModel::new(cfg.expflow, 0)?;
        model.params = ckpt.params_for(EXPFLOW, &model.params)?;
        model.trained_steps = ckpt.step;
        Ok(model)
    }

    pub fn load_poseflow(&self) -> Result<PoseFlowModel<f64>> {
        let (ckpt, cfg) = self.checkpoint(POSEFLOW)?;
        let mut model = PoseFlowModel::new(cfg.poseflow, 0)?;
        model.params = ckpt.params_for(POSEFLOW, &model.params)?;
        model.trained_steps = ckpt.step;
        Ok(model)
    }

    pub fn load_codebook(&self) -> Result<PatchAutoencoder<f64>> {
        let (ckpt, cfg) = self.checkpoint(CODEBOOK)?;
        let mut model = PatchAutoencoder::new(cfg.vq, 0)?;
        model.params = ckpt.params_for(CODEBOOK, &model.params)?;
        Ok(model)
    }

    pub fn load_vqig(&self) -> Result<VqigModel<f64>> {
        let (ckpt, cfg) = self.checkpoint(VQIG)?;
        let ae = PatchAutoencoder::new(cfg.vq, 0)?;
        let mut model = VqigModel::new(cfg.vqig, &ae, 0)?;
        model.params = ckpt.params_for(VQIG, &model.params)?;
        model.trained_steps = ckpt.step;
        Ok(model)
    }

    /// The saved bank, or one rebuilt from the training set.
    pub fn load_bank(&self, model: &ExpFlowModel<f64>) -> Result<LatentBank<f64>> {
        if self.bank_path().exists() {
            LatentBank::load(&self.bank_path())
        } else {
            self.build_bank(model, &self.train_data()?)
        }
    }

    pub fn build_bank(
        &self,
        model: &ExpFlowModel<f64>,
        train: &[CoeffSequence],
    ) -> Result<LatentBank<f64>> {
        let mut bank = LatentBank::build(model, train, self.config.projection.k_proj)?;
        bank.ridge = self.config.projection.ridge;
        Ok(bank)
    }

    pub fn patches(&self) -> Vec<Array2<f64>> {
        let d = &self.config.data;
        patch_corpus(
            d.patches,
            self.config.vq.resolution,
            d.classes,
            self.seed(Stream::Patches),
        )
    }

    pub fn held_patches(&self) -> Vec<Array2<f64>> {
        let d = &self.config.data;
        patch_corpus(
            d.held_pairs,
            self.config.vq.resolution,
            d.classes,
            self.seed(Stream::Eval),
        )
    }

    pub fn pairs(&self, held: bool) -> Vec<PatchPair> {
        let c = &self.config;
        let (n, stream) = if held {
            (c.data.held_pairs, Stream::HeldPairs)
        } else {
            (c.data.train_pairs, Stream::TrainPairs)
        };
        pair_corpus(
            n,
            c.vq.resolution,
            c.data.classes,
            c.vqig.beta_dim,
            c.vqig.pose_dim,
            self.seed(stream),
        )
    }
}

/// Everything needed to continue training from this point.
pub fn trainer_checkpoint<O: Objective<f64>>(
    kind: &str,
    config: &RunConfig,
    trainer: &Trainer<f64, O>,
) -> Checkpoint {
    Checkpoint {
        kind: kind.into(),
        config_json: config.to_json(),
        step: trainer.step,
        params: trainer.objective.params().clone(),
        optimizer: Some(trainer.optimizer.clone()),
        rng: Some(RngState::capture(&trainer.rng)),
    }
}

/// Restores parameters, optimizer moments, batch RNG and step count; the
/// trainer is untouched if anything is missing or mismatched.
pub fn restore_trainer<O: Objective<f64>>(
    trainer: &mut Trainer<f64, O>,
    ckpt: &Checkpoint,
    kind: &str,
) -> Result<()> {
    let params = ckpt.params_for(kind, trainer.objective.params())?;
    let optimizer = ckpt
        .optimizer
        .clone()
        .ok_or_else(|| Error::data("checkpoint has no optimizer state"))?;
    let rng = ckpt
        .rng
        .ok_or_else(|| Error::data("checkpoint has no RNG state"))?;
    params
        .same_shapes(&optimizer.m)
        .map_err(|e| Error::data(e.to_string()))?;
    *trainer.objective.params_mut() = params;
    trainer.optimizer = optimizer;
    trainer.rng = rng.restore();
    trainer.step = ckpt.step;
    trainer.objective.record_step(ckpt.step);
    Ok(())
}
