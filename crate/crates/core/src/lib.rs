//! Prompt-based fusion of two frozen unimodal transformers.
//!
//! A vision and a language transformer are pretrained separately and then
//! frozen. From a starting fusion layer onwards, each layer is run twice per
//! modality: once to *query* information through trainable query prompts, and
//! once to *fuse* the other modality's queried prompts (translated by a small
//! bottleneck MLP) into the main sequence. Only the prompts, the mapping MLPs,
//! and the two classifier heads are trained.

pub mod autograd;
pub mod baselines;
pub mod cli;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod profiling;
pub mod rng;
pub mod search;
pub mod training;

pub use error::{Error, Result};
