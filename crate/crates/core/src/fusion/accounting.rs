//! Closed-form trainable-parameter counts.

use serde::{Deserialize, Serialize};

use crate::fusion::config::{FusionConfig, MappingKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub prompts: usize,
    pub mappings: usize,
    pub heads: usize,
    pub total: usize,
    /// `mappings / total`
    pub mapping_share: f64,
}

/// The tower sizes the count depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TowerShape {
    pub layers: usize,
    pub d: usize,
}

/// Counts prompts, mapping weights and head weights without building a model.
///
/// ```text
/// prompts  = sum over fused layers and towers of (m_qp + m_qcp + m_fcp) * d
/// mappings = sum over fused layers of
///            (d_i b + b + b d_t + d_t) + (d_t b' + b' + b' d_i + d_i)
/// heads    = (d_i + 1) C + (d_t + 1) C
/// ```
pub fn count_trainable_params(img: TowerShape, txt: TowerShape, fusion: &FusionConfig) -> ParamBreakdown {
    let fused = img.layers.saturating_sub(fusion.lf_img);
    let (di, dt) = (img.d, txt.d);
    let m = fusion.m_qp + fusion.m_qcp + fusion.m_fcp;
    let prompts = fused * m * (di + dt);
    let mapping = |src: usize, dst: usize| {
        let b = fusion.bottleneck_dim(src, dst);
        src * b + b + b * dst + dst
    };
    let mappings = match fusion.mapping {
        MappingKind::Bottleneck => fused * (mapping(di, dt) + mapping(dt, di)),
        MappingKind::Identity => 0,
    };
    let c = fusion.n_classes;
    let heads = (di + 1) * c + (dt + 1) * c;
    let total = prompts + mappings + heads;
    ParamBreakdown {
        prompts,
        mappings,
        heads,
        total,
        mapping_share: if total == 0 { 0.0 } else { mappings as f64 / total as f64 },
    }
}
