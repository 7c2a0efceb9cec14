//! Run configuration: one JSON document layered over a named preset.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use talkflow_core::context::SceneSpec;
use talkflow_core::generators::{ExpFlowConfig, PoseFlowConfig, TrainConfig, DEFAULT_K_PROJ};
use talkflow_core::numerics::AdamConfig;
use talkflow_core::{Error, Result};
use talkflow_vq::{AeConfig, VqigConfig};

pub const PRESETS: [&str; 2] = ["desk", "paper-shape"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub train_sequences: usize,
    pub held_sequences: usize,
    pub seq_len: usize,
    pub noise: f64,
    /// Seed of the per-class scene tables.
    pub scene_seed: u64,
    pub train_pairs: usize,
    pub held_pairs: usize,
    pub patches: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            train_sequences: 200,
            held_sequences: 40,
            seq_len: 50,
            noise: 0.05,
            scene_seed: 1,
            train_pairs: 1024,
            held_pairs: 64,
            patches: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionConfig {
    pub k_proj: usize,
    pub ridge: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            k_proj: DEFAULT_K_PROJ,
            ridge: talkflow_core::numerics::DEFAULT_RIDGE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingBlock {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl TrainingBlock {
    fn new(steps: u64, batch: usize, lr: f64) -> Self {
        let adam = AdamConfig::default();
        Self {
            steps,
            batch,
            lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            clip_norm: Some(50.0),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            clip_norm: self.clip_norm,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub seeds: u64,
    pub length: usize,
    /// Held-out sequence supplying β₀ and the audio.
    pub sequence: usize,
    /// Emotion class to generate; `None` keeps the sequence's own class.
    pub class: Option<usize>,
    pub project: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            length: 50,
            sequence: 0,
            class: None,
            project: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    pub preset: String,
    pub seed: u64,
    pub data: DataConfig,
    pub expflow: ExpFlowConfig,
    pub poseflow: PoseFlowConfig,
    pub projection: ProjectionConfig,
    pub vq: AeConfig,
    pub vqig: VqigConfig,
    pub train_expflow: TrainingBlock,
    pub train_poseflow: TrainingBlock,
    pub train_codebook: TrainingBlock,
    pub train_vqig: TrainingBlock,
    pub sample: SampleConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            experiment: "desk".into(),
            preset: "desk".into(),
            seed: 0,
            data: DataConfig::default(),
            expflow: ExpFlowConfig::default(),
            poseflow: PoseFlowConfig::default(),
            projection: ProjectionConfig::default(),
            vq: AeConfig::default(),
            vqig: VqigConfig::default(),
            train_expflow: TrainingBlock::new(10_000, 64, 1e-3),
            train_poseflow: TrainingBlock::new(2_000, 64, 1e-3),
            train_codebook: TrainingBlock::new(2_000, 16, 2e-3),
            train_vqig: TrainingBlock::new(2_000, 16, 1e-3),
            sample: SampleConfig::default(),
        }
    }

    /// Full-size image shapes; the motion side matches the desk preset.
    pub fn paper_shape() -> Self {
        Self {
            experiment: "paper-shape".into(),
            preset: "paper-shape".into(),
            vq: AeConfig::paper_shape(),
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-shape" => Ok(Self::paper_shape()),
            _ => Err(Error::config(format!(
                "unknown preset {name:?}; known: {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Layers `overrides` over the preset it names (or `preset`, which wins).
    pub fn from_value(overrides: Value, preset: Option<&str>) -> Result<Self> {
        let Value::Object(map) = &overrides else {
            return Err(Error::config("config must be a JSON object"));
        };
        let name = match (preset, map.get("preset")) {
            (Some(p), _) => p.to_owned(),
            (None, Some(Value::String(p))) => p.clone(),
            (None, Some(_)) => return Err(Error::config("preset must be a string")),
            (None, None) => "desk".to_owned(),
        };
        let mut base =
            serde_json::to_value(Self::preset(&name)?).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut base, overrides);
        base["preset"] = Value::String(name);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, preset: Option<&str>) -> Result<Self> {
        let value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        Self::from_value(value, preset)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.is_empty() || self.experiment.contains(['/', '\\']) {
            return Err(Error::config(
                "experiment name must be a non-empty path component",
            ));
        }
        let d = &self.data;
        if d.classes == 0 || d.train_sequences == 0 || d.held_sequences == 0 || d.seq_len < 2 {
            return Err(Error::config("data sizes must be positive (seq_len ≥ 2)"));
        }
        if d.noise < 0.0 {
            return Err(Error::config("noise must be nonnegative"));
        }
        if d.train_pairs == 0 || d.held_pairs == 0 || d.patches == 0 {
            return Err(Error::config("patch and pair counts must be positive"));
        }
        if self.expflow.classes != d.classes {
            return Err(Error::config(format!(
                "expflow.classes ({}) must equal data.classes ({})",
                self.expflow.classes, d.classes
            )));
        }
        if self.expflow.dim != 64 || self.poseflow.dim != 6 {
            return Err(Error::config(
                "the synthetic scene has 64 expression and 6 pose coefficients",
            ));
        }
        if self.vqig.beta_dim != self.expflow.dim || self.vqig.pose_dim != self.poseflow.dim {
            return Err(Error::config(
                "vqig coefficient widths must match the flows",
            ));
        }
        self.expflow.validate()?;
        self.poseflow.context.validate()?;
        self.vq.validate()?;
        self.vqig.validate(&self.vq)?;
        if self.projection.k_proj == 0 || !(self.projection.ridge >= 0.0) {
            return Err(Error::config("projection needs k_proj ≥ 1 and ridge ≥ 0"));
        }
        for (name, t) in [
            ("train_expflow", &self.train_expflow),
            ("train_poseflow", &self.train_poseflow),
            ("train_codebook", &self.train_codebook),
            ("train_vqig", &self.train_vqig),
        ] {
            t.train_config(0)
                .validate()
                .map_err(|e| Error::config(format!("{name}: {e}")))?;
        }
        if self.sample.seeds == 0 || self.sample.length == 0 {
            return Err(Error::config(
                "sample needs at least one seed and one frame",
            ));
        }
        if self.sample.length > d.seq_len {
            return Err(Error::config("sample length exceeds the sequence length"));
        }
        if self.sample.sequence >= d.held_sequences {
            return Err(Error::config(
                "sample.sequence is not a held-out sequence index",
            ));
        }
        if matches!(self.sample.class, Some(c) if c >= d.classes) {
            return Err(Error::config("sample.class out of range"));
        }
        Ok(())
    }

    pub fn scene(&self) -> SceneSpec {
        let mut spec = SceneSpec::generate(self.data.classes, self.data.scene_seed);
        spec.seq_len = self.data.seq_len;
        spec.noise = self.data.noise;
        spec
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Seeds for the independent random streams of a run.
    pub fn stream_seed(&self, stream: Stream) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stream as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    TrainData = 1,
    HeldData = 2,
    ExpFlowInit = 3,
    ExpFlowTrain = 4,
    PoseInit = 5,
    PoseTrain = 6,
    Patches = 7,
    AeInit = 8,
    AeTrain = 9,
    TrainPairs = 10,
    HeldPairs = 11,
    VqigInit = 12,
    VqigTrain = 13,
    Eval = 14,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
