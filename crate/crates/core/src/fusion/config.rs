use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    SingleLabel,
    MultiLabel,
}

/// How queried prompts are carried into the other modality's space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MappingKind {
    /// `W2 relu(W1 x + b1) + b2`
    #[default]
    Bottleneck,
    /// Pass-through; only valid when both towers share a hidden size.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// First fused layer of the vision tower.
    pub lf_img: usize,
    /// First fused layer of the text tower.
    pub lf_txt: usize,
    /// Query prompt length.
    pub m_qp: usize,
    /// Query context prompt length.
    pub m_qcp: usize,
    /// Fusion context prompt length.
    pub m_fcp: usize,
    /// Overrides the bottleneck width rule when set.
    #[serde(default)]
    pub bottleneck: Option<usize>,
    #[serde(default)]
    pub mapping: MappingKind,
    pub n_classes: usize,
    #[serde(default)]
    pub loss: LossKind,
}

impl FusionConfig {
    /// Fusion over the last two layers of each tower with prompt length `m`.
    pub fn deep_two(img: &EncoderConfig, txt: &EncoderConfig, m: usize, n_classes: usize) -> Self {
        FusionConfig {
            lf_img: img.layers.saturating_sub(2),
            lf_txt: txt.layers.saturating_sub(2),
            m_qp: m,
            m_qcp: m,
            m_fcp: m,
            bottleneck: None,
            mapping: MappingKind::Bottleneck,
            n_classes,
            loss: LossKind::SingleLabel,
        }
    }

    pub fn with_lf(mut self, img: &EncoderConfig, txt: &EncoderConfig, fused_layers: usize) -> Self {
        self.lf_img = img.layers - fused_layers;
        self.lf_txt = txt.layers - fused_layers;
        self
    }

    pub fn with_prompt_len(mut self, m: usize) -> Self {
        self.m_qp = m;
        self.m_qcp = m;
        self.m_fcp = m;
        self
    }

    /// Number of fused layers, shared by both towers.
    pub fn fusion_layers(&self, img: &EncoderConfig) -> usize {
        img.layers - self.lf_img
    }

    /// Width of the mapping between hidden sizes `d_src` and `d_dst`.
    pub fn bottleneck_dim(&self, d_src: usize, d_dst: usize) -> usize {
        self.bottleneck
            .unwrap_or_else(|| bottleneck_rule(d_src, d_dst))
    }

    pub fn validate(&self, img: &EncoderConfig, txt: &EncoderConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lf_img > img.layers {
            return bad(format!("lf_img = {} exceeds {} layers", self.lf_img, img.layers));
        }
        if self.lf_txt > txt.layers {
            return bad(format!("lf_txt = {} exceeds {} layers", self.lf_txt, txt.layers));
        }
        if img.layers - self.lf_img != txt.layers - self.lf_txt {
            return bad(format!(
                "towers fuse different numbers of layers: {} (vision) vs {} (text)",
                img.layers - self.lf_img,
                txt.layers - self.lf_txt
            ));
        }
        if self.n_classes == 0 {
            return bad("n_classes must be >= 1".into());
        }
        if self.mapping == MappingKind::Identity && img.d != txt.d {
            return bad(format!(
                "identity mapping needs equal hidden sizes, got {} and {}",
                img.d, txt.d
            ));
        }
        if self.bottleneck == Some(0) {
            return bad("bottleneck must be >= 1".into());
        }
        Ok(())
    }
}

/// `max(1, floor(min(d_src, d_dst) / 2))`
pub fn bottleneck_rule(d_src: usize, d_dst: usize) -> usize {
    (d_src.min(d_dst) / 2).max(1)
}
