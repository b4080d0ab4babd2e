//! Prompt-based fusion: prompt banks, mapping functions, the fused layer and
//! the two-tower model.

pub mod accounting;
pub mod config;
pub mod head;
pub mod mapping;
pub mod model;
pub mod prompts;

pub use accounting::{count_trainable_params, ParamBreakdown, TowerShape};
pub use config::{bottleneck_rule, FusionConfig, LossKind, MappingKind};
pub use head::Head;
pub use mapping::Mapping;
pub use model::{fusion_stage, querying_stage, BaseFeatures, FusionLayer, PmfModel, SeqFeatures};
pub use prompts::{PromptBank, PROMPT_INIT_STD};
