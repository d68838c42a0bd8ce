//! Repository-wide TOML configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::error::{Error, Result};
use crate::featnet::FeatNetConfig;
use crate::memory::MemoryConfig;

/// Architecture variant: the full model or one of its ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Controller input is the plain average of the patch vectors.
    NoAtt,
    /// FIFO memory; the retrieved template is the mean of stored slots.
    Queue,
    /// Read the single most similar slot instead of a soft blend.
    HardRead,
    /// Residual gate fixed at one.
    NoRes,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoAtt, Variant::Queue, Variant::HardRead, Variant::NoRes];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAtt => "no_att",
            Variant::Queue => "queue",
            Variant::HardRead => "hard_read",
            Variant::NoRes => "no_res",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Scale candidates are `scale_step^k` for `k` in `-(num_scales/2)..=num_scales/2`.
    pub scale_step: f64,
    pub num_scales: usize,
    /// Exponential smoothing factor `γ` for the scale estimate.
    pub scale_smoothing: f64,
    /// Blend weight of the cosine window.
    pub window_factor: f64,
    pub upsample: usize,
    /// Minimum side of a predicted box, in pixels.
    pub min_side: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            scale_step: 1.05,
            num_scales: 3,
            scale_smoothing: 0.6,
            window_factor: 0.15,
            upsample: 4,
            min_side: 2.0,
        }
    }
}

impl TrackerConfig {
    /// Ascending scale factors, e.g. `1.05^[-1, 0, 1]`.
    pub fn scale_factors(&self) -> Vec<f64> {
        let half = (self.num_scales / 2) as i32;
        (-half..=half).map(|k| self.scale_step.powi(k)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub clip_len: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Positive-label radius on the response map, in cells.
    pub label_radius: f64,
    /// Write ground-truth crops to memory during training instead of crops
    /// at the predicted position.
    pub teacher_forcing: bool,
    /// Maximum relative stretch of training crops.
    pub stretch: f64,
    /// Maximum translation of training crops, in patch pixels.
    pub translate: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            clip_len: 16,
            learning_rate: 1e-4,
            lr_decay: 0.8,
            lr_decay_every: 10_000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            label_radius: 2.0,
            teacher_forcing: true,
            stretch: 0.05,
            translate: 4.0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    /// Step-decayed learning rate.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((step / self.lr_decay_every.max(1)) as i32)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub variant: Variant,
    pub featnet: FeatNetConfig,
    pub controller: ControllerConfig,
    pub memory: MemoryConfig,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.featnet.validate()?;
        let t = &self.tracker;
        if !(t.scale_smoothing > 0.0 && t.scale_smoothing <= 1.0) {
            return Err(Error::Config("scale_smoothing must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&t.window_factor) {
            return Err(Error::Config("window_factor must lie in [0, 1]".into()));
        }
        if t.num_scales == 0 || t.num_scales.is_multiple_of(2) || t.scale_step < 1.0 {
            return Err(Error::Config("num_scales must be odd and scale_step >= 1".into()));
        }
        if t.upsample == 0 {
            return Err(Error::Config("upsample must be >= 1".into()));
        }
        if self.memory.slots == 0 || !(self.memory.access_decay > 0.0 && self.memory.access_decay < 1.0) {
            return Err(Error::Config("memory needs >= 1 slot and decay in (0, 1)".into()));
        }
        let k = self.controller.keep_prob;
        if !(k > 0.0 && k <= 1.0) || self.controller.hidden < 2 {
            return Err(Error::Config("controller keep_prob in (0, 1] and hidden >= 2".into()));
        }
        if self.train.clip_len < 2 || self.train.batch == 0 {
            return Err(Error::Config("clip_len must be >= 2 and batch >= 1".into()));
        }
        Ok(())
    }
}
