use crate::data::{AugmentPair, AugmentParams};
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, HeadConfig};
use crate::optim::{AdamWConfig, ClipConfig};
use crate::sampler::SamplerConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    Cifar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Synthetic only.
    pub classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    /// Held-out images per class for the probe (synthetic only).
    pub holdout_per_class: usize,
    /// CIFAR only: training and held-out binary files.
    pub path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Synthetic,
            classes: 2,
            n_per_class: 64,
            image_size: 32,
            holdout_per_class: 50,
            path: None,
            test_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: String,
    pub heads: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: "vit-micro".into(),
            heads: "micro".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPreset {
    Cifar,
    Imagenet,
    /// Random resized crop and flip only.
    Geometric,
    /// Full-image view, no randomness.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub preset: AugmentPreset,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            preset: AugmentPreset::Cifar,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            batch_size: 512,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub warmup_epochs: u64,
    pub epochs: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 20,
            epochs: 1600,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentumConfig {
    pub enabled: bool,
    pub start: f64,
    pub end: f64,
}

impl Default for MomentumConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            start: 0.99,
            end: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointConfig {
    /// Save every this many steps; 0 saves only at the end of training.
    pub every_steps: u64,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        Self { every_steps: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub k: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { k: 10 }
    }
}

/// Everything needed to reproduce a training run. Serialized as TOML with one
/// section per component; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub clip: ClipConfig,
    pub momentum_encoder: MomentumConfig,
    pub checkpoint: CheckpointConfig,
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::smoke()
    }
}

impl TrainConfig {
    /// Full CIFAR recipe: ViT-Tiny/2, τ 0.1, s 0.25, γ 3, batch 512, lr 1e-3,
    /// weight decay 0.05, 20 warmup epochs out of 1600, no clip, no momentum encoder.
    pub fn cifar(train: PathBuf, test: Option<PathBuf>) -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                kind: DataKind::Cifar,
                path: Some(train),
                test_path: test,
                ..DataConfig::default()
            },
            model: ModelConfig {
                backbone: "vit-tiny/2".into(),
                heads: "cifar".into(),
            },
            augment: AugmentConfig::default(),
            sampler: SamplerConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            clip: ClipConfig::disabled(),
            momentum_encoder: MomentumConfig::default(),
            checkpoint: CheckpointConfig { every_steps: 10_000 },
            probe: ProbeConfig::default(),
        }
    }

    /// Desk-scale run: ViT-Micro on 2-class synthetic data, 200 steps.
    pub fn smoke() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            sampler: SamplerConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig {
                batch_size: 32,
                ..OptimConfig::default()
            },
            schedule: ScheduleConfig {
                warmup_epochs: 5,
                epochs: 50,
            },
            clip: ClipConfig::disabled(),
            momentum_encoder: MomentumConfig::default(),
            checkpoint: CheckpointConfig { every_steps: 100 },
            probe: ProbeConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "smoke" => Ok(Self::smoke()),
            _ => Err(Error::Config(format!(
                "unknown training preset {name:?} (CIFAR runs need a config file with data paths)"
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn backbone(&self) -> Result<BackboneConfig> {
        let mut b = BackboneConfig::preset(&self.model.backbone)?;
        if b.image_size != self.image_size() {
            return Err(Error::Config(format!(
                "backbone {} expects {}px views but data has {}px images",
                self.model.backbone,
                b.image_size,
                self.image_size()
            )));
        }
        b.channels = 3;
        Ok(b)
    }

    pub fn heads(&self) -> Result<HeadConfig> {
        HeadConfig::preset(&self.model.heads)
    }

    pub fn image_size(&self) -> usize {
        match self.data.kind {
            DataKind::Synthetic => self.data.image_size,
            DataKind::Cifar => crate::data::cifar::SIDE,
        }
    }

    pub fn augment_pair(&self) -> AugmentPair {
        let v = self.image_size();
        match self.augment.preset {
            AugmentPreset::Cifar => AugmentPair::cifar(v),
            AugmentPreset::Imagenet => AugmentPair::imagenet(v),
            AugmentPreset::Geometric => AugmentPair::symmetric(AugmentParams::geometric_only(v, (0.15, 1.0))),
            AugmentPreset::Identity => AugmentPair::symmetric(AugmentParams::identity(v)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone()?.validate()?;
        self.heads()?.validate()?;
        self.sampler.validate()?;
        self.optim.adamw().validate()?;
        if self.clip.enabled {
            self.clip.validate()?;
        }
        if !(self.loss.tau > 0.0 && self.loss.tau.is_finite()) {
            return Err(Error::invalid("loss.tau", format!("{} must be > 0", self.loss.tau)));
        }
        if self.optim.batch_size < 2 {
            return Err(Error::invalid("optim.batch_size", "need at least 2 samples for negatives"));
        }
        if self.schedule.epochs == 0 || self.schedule.warmup_epochs > self.schedule.epochs {
            return Err(Error::invalid("schedule", "need 0 < epochs and warmup_epochs <= epochs"));
        }
        let m = &self.momentum_encoder;
        if m.enabled && !(0.0 <= m.start && m.start <= m.end && m.end <= 1.0) {
            return Err(Error::invalid("momentum_encoder", "need 0 <= start <= end <= 1"));
        }
        if self.probe.k == 0 {
            return Err(Error::invalid("probe.k", "must be positive"));
        }
        match self.data.kind {
            DataKind::Synthetic => {
                if self.data.classes < 2 || self.data.n_per_class == 0 {
                    return Err(Error::invalid("data", "synthetic data needs >= 2 classes and n_per_class >= 1"));
                }
            }
            DataKind::Cifar => {
                if self.data.path.is_none() {
                    return Err(Error::invalid("data.path", "CIFAR runs need a training file"));
                }
            }
        }
        Ok(())
    }
}
