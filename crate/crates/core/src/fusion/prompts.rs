use crate::autograd::{DType, Tensor};
use crate::error::Result;
use crate::fusion::config::FusionConfig;
use crate::rng::{self, Rng};

/// Standard deviation of the Gaussian prompt initialization.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// The three prompt kinds of one tower at one fused layer. A kind with zero
/// length is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerPrompts {
    pub qp: Option<Tensor>,
    pub qcp: Option<Tensor>,
    pub fcp: Option<Tensor>,
}

impl TowerPrompts {
    pub fn rows(&self) -> usize {
        [&self.qp, &self.qcp, &self.fcp]
            .iter()
            .filter_map(|t| t.as_ref())
            .map(|t| t.shape()[0])
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrompts {
    pub img: TowerPrompts,
    pub txt: TowerPrompts,
}

/// Fresh prompts for every fused layer and both towers.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub layers: Vec<LayerPrompts>,
}

impl PromptBank {
    /// Draws every entry i.i.d. from `N(0, 0.02^2)`. Draw order: layer, then
    /// vision before text, then QP, QCP, FCP.
    pub fn init(
        config: &FusionConfig,
        fusion_layers: usize,
        d_img: usize,
        d_txt: usize,
        dtype: DType,
        rng: &mut Rng,
    ) -> Result<Self> {
        let draw = |m: usize, d: usize, rng: &mut Rng| -> Result<Option<Tensor>> {
            if m == 0 {
                return Ok(None);
            }
            let data = rng::gaussian_vec(rng, m * d, 0.0, PROMPT_INIT_STD);
            Ok(Some(Tensor::new(vec![m, d], dtype, data)?.with_requires_grad(true)))
        };
        let tower = |d: usize, rng: &mut Rng| -> Result<TowerPrompts> {
            Ok(TowerPrompts {
                qp: draw(config.m_qp, d, rng)?,
                qcp: draw(config.m_qcp, d, rng)?,
                fcp: draw(config.m_fcp, d, rng)?,
            })
        };
        let mut layers = Vec::with_capacity(fusion_layers);
        for _ in 0..fusion_layers {
            let img = tower(d_img, rng)?;
            let txt = tower(d_txt, rng)?;
            layers.push(LayerPrompts { img, txt });
        }
        Ok(PromptBank { layers })
    }

    pub fn rows(&self) -> usize {
        self.layers.iter().map(|l| l.img.rows() + l.txt.rows()).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| [&l.img.qp, &l.img.qcp, &l.img.fcp, &l.txt.qp, &l.txt.qcp, &l.txt.fcp])
            .filter_map(|t| t.as_ref())
            .flat_map(|t| t.data().iter().copied())
    }
}
