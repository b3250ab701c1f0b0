//! Run configuration: model, training, diffusion, and data-generation
//! settings, loadable from a `key = value` TOML file. Every knob has a
//! default, so an empty file is a valid config.

use crate::error::{Error, Result};
use crate::temporal_map::scale_geometries;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderVariant {
    Cnn,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    Concat,
    CrossAttn,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VmapMode {
    MaxPool,
    StackedConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    MseFull,
    BceRescaled,
    BceFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_segments: usize,
    pub unit: f64,
    pub d_word: usize,
    pub d_video: usize,
    pub d_sentence: usize,
    pub d_fused: usize,
    pub d_hidden: usize,
    pub d_time: usize,
    pub lstm_hidden: usize,
    pub scales: usize,
    pub anchors: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub variant: DecoderVariant,
    pub conditioning: Conditioning,
    pub vmap_mode: VmapMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_segments: 16,
            unit: 1.0,
            d_word: 16,
            d_video: 16,
            d_sentence: 16,
            d_fused: 32,
            d_hidden: 16,
            d_time: 64,
            lstm_hidden: 16,
            scales: 2,
            anchors: 8,
            blocks: 3,
            kernel: 5,
            variant: DecoderVariant::Cnn,
            conditioning: Conditioning::Concat,
            vmap_mode: VmapMode::MaxPool,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 {
            return Err(Error::InvalidParameter("blocks must be >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidParameter("kernel size must be odd".into()));
        }
        if self.conditioning == Conditioning::CrossAttn && self.variant != DecoderVariant::Transformer {
            return Err(Error::InvalidParameter(
                "cross-attn conditioning requires the transformer variant".into(),
            ));
        }
        scale_geometries(self.n_segments, self.scales, self.anchors)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub rescale_t_min: f64,
    pub rescale_t_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 17,
            loss: LossKind::MseFull,
            rescale_t_min: 0.5,
            rescale_t_max: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter("learning rate must be > 0".into()));
        }
        if !(0.0 <= self.rescale_t_min && self.rescale_t_min < self.rescale_t_max && self.rescale_t_max <= 1.0)
        {
            return Err(Error::InvalidParameter(
                "need 0 <= t_min < t_max <= 1 for rescale thresholds".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidParameter("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eta: f64,
    pub infer_steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            t_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.05,
            eta: 0.0,
            infer_steps: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_segments: usize,
    pub unit: f64,
    pub d_word: usize,
    pub d_video: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub prototypes: usize,
    pub sigma_in: f64,
    pub sigma_query: f64,
    pub seed: u64,
    pub grid_aligned: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_segments: 16,
            unit: 1.0,
            d_word: 16,
            d_video: 16,
            m_min: 3,
            m_max: 8,
            prototypes: 8,
            sigma_in: 0.1,
            sigma_query: 0.1,
            seed: 7,
            grid_aligned: true,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prototypes < 2 {
            return Err(Error::InvalidParameter("need at least 2 prototypes".into()));
        }
        if self.sigma_in < 0.0 || self.sigma_query < 0.0 {
            return Err(Error::InvalidParameter("noise sigmas must be >= 0".into()));
        }
        if self.m_min < 1 || self.m_min > self.m_max {
            return Err(Error::InvalidParameter(
                "need 1 <= m_min <= m_max for the word count range".into(),
            ));
        }
        if self.n_segments < 1 || !(self.unit > 0.0) {
            return Err(Error::InvalidParameter("need N >= 1 and tau > 0".into()));
        }
        Ok(())
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_steps < 1 {
            return Err(Error::InvalidParameter("need t_steps >= 1".into()));
        }
        if self.infer_steps < 1 || self.infer_steps > self.t_steps {
            return Err(Error::InvalidParameter(
                "need 1 <= infer_steps <= t_steps".into(),
            ));
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::InvalidParameter(
                "need 0 < beta_start <= beta_end < 1".into(),
            ));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::InvalidParameter("eta must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub diffusion: DiffusionConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.diffusion.validate()?;
        if self.model.n_segments != self.data.n_segments {
            return Err(Error::Config(
                "model.n_segments must match data.n_segments".into(),
            ));
        }
        Ok(())
    }
}
