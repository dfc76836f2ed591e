//! Run configuration: one nested TOML document covering model, data
//! synthesis, pretraining, transfer evaluation and the toy benchmark.
//! Every field has a desk-scale default, so an empty file is a valid config.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CtpError, Result};
use crate::geometry::Sigmas;
use crate::model::ModelSpec;
use crate::trajsynth::TrajectoryConstraints;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    /// Re-synthesize patches and trajectories every epoch.
    #[default]
    OnTheFly,
    /// Train on a fixed dataset written by `generate`.
    Pregenerated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Panning value-noise backgrounds, no external data needed.
    #[default]
    Procedural,
    /// Sub-directories of `frames_dir`, each holding the frames of one video.
    Frames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub mode: DataMode,
    /// Manifest of a pregenerated dataset.
    pub manifest: Option<String>,
    pub source: SourceKind,
    pub frames_dir: Option<String>,
    /// Number of source clips (procedural mode) or clips to generate.
    pub num_clips: usize,
    /// Inclusive range of the temporal stride between sampled frames.
    pub frame_interval: [usize; 2],
    /// Trajectories per clip.
    pub k: usize,
    pub p_mask: f64,
    pub trajectory: TrajectoryConstraints,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            mode: DataMode::OnTheFly,
            manifest: None,
            source: SourceKind::Procedural,
            frames_dir: None,
            num_clips: 256,
            frame_interval: [1, 5],
            k: 3,
            p_mask: 0.2,
            trajectory: TrajectoryConstraints::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Write a checkpoint after every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            base_lr: 0.01,
            lr_decay: 0.1,
            milestones: vec![10, 20],
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            checkpoint_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CtpError::config("train.epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(CtpError::config("train.batch_size must be at least 1"));
        }
        validate_schedule("train", self.epochs, &self.milestones)?;
        if !(self.base_lr > 0.0 && self.lr_decay > 0.0) {
            return Err(CtpError::config("train.base_lr and train.lr_decay must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(CtpError::config("train.momentum must lie in [0, 1) and weight_decay be non-negative"));
        }
        Ok(())
    }
}

fn validate_schedule(section: &str, epochs: usize, milestones: &[usize]) -> Result<()> {
    if milestones.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CtpError::config(format!("{section}.milestones must be strictly increasing")));
    }
    if milestones.last().is_some_and(|m| *m >= epochs) {
        return Err(CtpError::config(format!("{section}.milestones must be smaller than {section}.epochs")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Train only the classifier on top of a frozen encoder.
    #[default]
    Frozen,
    /// Train encoder and classifier together.
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Clips per video, picked uniformly in time, for features and inference.
    pub n_clips: usize,
    /// Standardize frozen features with training-set statistics.
    pub standardize: bool,
    /// Random crop, flip and color jitter while finetuning.
    pub augment: bool,
    pub retrieval_ks: Vec<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            mode: ProbeMode::Frozen,
            epochs: 30,
            base_lr: 0.01,
            lr_decay: 0.1,
            milestones: vec![12, 24],
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 16,
            n_clips: 3,
            standardize: true,
            augment: false,
            retrieval_ks: vec![1, 5, 10, 20, 50],
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.n_clips == 0 {
            return Err(CtpError::config("probe.epochs, probe.batch_size and probe.n_clips must be positive"));
        }
        validate_schedule("probe", self.epochs, &self.milestones)?;
        if self.retrieval_ks.is_empty() || self.retrieval_ks.contains(&0) {
            return Err(CtpError::config("probe.retrieval_ks must be non-empty and positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub n_classes: usize,
    pub per_class: usize,
    /// Frames per video; must be at least the encoder clip length.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            per_class: 50,
            frames: 16,
            height: 64,
            width: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CtpConfig {
    pub seed: u64,
    pub sigmas: Sigmas,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub toy: ToyConfig,
}

impl CtpConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| CtpError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| CtpError::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| match e {
            CtpError::Config(m) => CtpError::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.sigmas.validate()?;
        self.model.validate()?;
        self.data.trajectory.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        let d = &self.data;
        if d.k == 0 {
            return Err(CtpError::config("data.k must be at least 1"));
        }
        if !(0.0..1.0).contains(&d.p_mask) {
            return Err(CtpError::config("data.p_mask must lie in [0, 1)"));
        }
        if d.frame_interval[0] == 0 || d.frame_interval[0] > d.frame_interval[1] {
            return Err(CtpError::config("data.frame_interval must be an ordered range of positive strides"));
        }
        if d.mode == DataMode::Pregenerated && d.manifest.is_none() {
            return Err(CtpError::config("data.mode = \"pregenerated\" needs data.manifest"));
        }
        if d.source == SourceKind::Frames && d.frames_dir.is_none() {
            return Err(CtpError::config("data.source = \"frames\" needs data.frames_dir"));
        }
        if self.toy.n_classes < 2 || self.toy.per_class == 0 {
            return Err(CtpError::config("toy.n_classes must be at least 2 and toy.per_class positive"));
        }
        if self.toy.frames < self.model.encoder.input_t {
            return Err(CtpError::config("toy.frames must be at least model.encoder.input_t"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes to JSON");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
