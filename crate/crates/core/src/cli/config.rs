//! The JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::DType;
use crate::baselines::BaselineKind;
use crate::datagen::{TaskKind, TaskSpec};
use crate::encoder::{EncoderConfig, InputConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::profiling::SweepAxis;
use crate::search::SearchSpace;
use crate::training::{LossChoice, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Pmf,
    Linear,
    LateConcat,
    PromptImgOnly,
    PromptTxtOnly,
}

impl ModelKind {
    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            ModelKind::Pmf => None,
            ModelKind::Linear => Some(BaselineKind::Linear),
            ModelKind::LateConcat => Some(BaselineKind::LateConcat),
            ModelKind::PromptImgOnly => Some(BaselineKind::PromptImgOnly),
            ModelKind::PromptTxtOnly => Some(BaselineKind::PromptTxtOnly),
        }
    }
}

/// Pretrained tower checkpoints, as written by `pretrain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackbonePaths {
    pub img: PathBuf,
    pub txt: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub kind: ModelKind,
    #[serde(default)]
    pub dtype: DType,
    #[serde(default = "EncoderConfig::vision_default")]
    pub img: EncoderConfig,
    #[serde(default = "EncoderConfig::text_default")]
    pub txt: EncoderConfig,
    /// Defaults to fusing the last two layers with prompt length 4.
    #[serde(default)]
    pub fusion: Option<FusionConfig>,
    #[serde(default)]
    pub backbones: Option<BackbonePaths>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Pmf,
            dtype: DType::F32,
            img: EncoderConfig::vision_default(),
            txt: EncoderConfig::text_default(),
            fusion: None,
            backbones: None,
        }
    }
}

fn default_n_train() -> usize {
    5000
}
fn default_n_val() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub task: TaskSpec,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_val")]
    pub n_val: usize,
    /// Datasets to read instead of generating.
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub val_path: Option<PathBuf>,
}

fn default_pretrain_n() -> usize {
    2000
}
fn default_pretrain_val() -> usize {
    500
}
fn default_attempts() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub img: TrainConfig,
    pub txt: TrainConfig,
    #[serde(default = "default_pretrain_n")]
    pub n_train: usize,
    #[serde(default = "default_pretrain_val")]
    pub n_val: usize,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
}

fn default_profile_batch() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    #[serde(default = "default_profile_batch")]
    pub batch_size: usize,
}

fn default_search_n_train() -> usize {
    2000
}
fn default_search_n_val() -> usize {
    500
}
fn default_search_epochs() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub space: SearchSpace,
    /// Short-training proxy used as the objective.
    #[serde(default = "default_search_n_train")]
    pub n_train: usize,
    #[serde(default = "default_search_n_val")]
    pub n_val: usize,
    #[serde(default = "default_search_epochs")]
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    pub data: DataSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchSection>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies the root seed, fills derived defaults and validates every
    /// present section.
    pub fn materialize(mut self, seed_override: Option<u64>) -> Result<Self> {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        let task = &self.data.task;
        task.validate()?;
        let n_classes = task.kind.n_classes();
        let m = &mut self.model;
        m.img.validate()?;
        m.txt.validate()?;
        if !matches!(m.img.input, InputConfig::Vision { .. }) {
            return Err(Error::Config("model.img must be a vision encoder".into()));
        }
        if !matches!(m.txt.input, InputConfig::Text { .. }) {
            return Err(Error::Config("model.txt must be a text encoder".into()));
        }
        check_inputs(&m.img, &m.txt, task)?;
        let fusion = m
            .fusion
            .get_or_insert_with(|| FusionConfig::deep_two(&m.img, &m.txt, 4, n_classes));
        fusion.validate(&m.img, &m.txt)?;
        if fusion.n_classes != n_classes {
            return Err(Error::Config(format!(
                "model.fusion.n_classes = {} but task {:?} has {n_classes} classes",
                fusion.n_classes, task.kind
            )));
        }
        if self.data.n_train == 0 || self.data.n_val == 0 {
            return Err(Error::Config("data.n_train and data.n_val must be >= 1".into()));
        }
        let expected_loss = match task.kind {
            TaskKind::Multilabel2 => LossChoice::BceMultilabel,
            _ => LossChoice::WeightedCe,
        };
        if let Some(t) = &mut self.train {
            t.seed = self.seed;
            t.validate()?;
            if t.loss != expected_loss {
                return Err(Error::Config(format!(
                    "train.loss {:?} does not fit task {:?}",
                    t.loss, task.kind
                )));
            }
        }
        if let Some(p) = &mut self.pretrain {
            for t in [&mut p.img, &mut p.txt] {
                t.seed = self.seed;
                t.loss = LossChoice::WeightedCe;
                t.validate()?;
            }
            if p.n_train == 0 || p.max_attempts == 0 {
                return Err(Error::Config("pretrain.n_train and max_attempts must be >= 1".into()));
            }
        }
        if let Some(p) = &self.profile {
            if p.values.is_empty() || p.batch_size == 0 {
                return Err(Error::Config("profile needs values and batch_size >= 1".into()));
            }
        }
        if let Some(s) = &self.search {
            s.space.validate(Some(self.model.img.layers.min(self.model.txt.layers)))?;
            if s.n_train == 0 || s.n_val == 0 || s.epochs == 0 {
                return Err(Error::Config("search n_train, n_val and epochs must be >= 1".into()));
            }
        }
        Ok(self)
    }

    pub fn fusion(&self) -> &FusionConfig {
        self.model.fusion.as_ref().expect("materialized config")
    }

    pub fn train_section(&self) -> Result<&TrainConfig> {
        self.train
            .as_ref()
            .ok_or_else(|| Error::Config("config has no `train` section".into()))
    }
}

fn check_inputs(img: &EncoderConfig, txt: &EncoderConfig, task: &TaskSpec) -> Result<()> {
    if let InputConfig::Vision {
        height,
        width,
        channels,
        patch,
    } = img.input
    {
        if (height, width, channels) != (task.height, task.width, task.channels) {
            return Err(Error::Config(format!(
                "model.img expects {height}x{width}x{channels} images, task produces {}x{}x{}",
                task.height, task.width, task.channels
            )));
        }
        if patch != task.patch {
            log::warn!("model.img patch {patch} differs from data.task.patch {}", task.patch);
        }
    }
    if let InputConfig::Text {
        vocab_size,
        max_len,
    } = txt.input
    {
        if vocab_size < task.vocab_size || max_len < task.max_len {
            return Err(Error::Config(format!(
                "model.txt (vocab {vocab_size}, max_len {max_len}) cannot hold task text (vocab {}, max_len {})",
                task.vocab_size, task.max_len
            )));
        }
    }
    Ok(())
}
