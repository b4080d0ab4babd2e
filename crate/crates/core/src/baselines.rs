//! Reference models bracketing PMF.
//!
//! * `linear`: frozen towers, one head on `[CLS_img | CLS_txt]`;
//! * `late_concat`: the same architecture with everything trainable;
//! * `prompt_img_only` / `prompt_txt_only`: one frozen tower with deep
//!   prompts (fresh prompts appended at every layer input and dropped at the
//!   layer output) and a head on that tower's CLS.

use serde::{Deserialize, Serialize};

use crate::autograd::{DType, ParamId, ParamStore, Tape, Tensor, Var};
use crate::datagen::MultimodalRecord;
use crate::encoder::{Encoder, EncoderConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::fusion::model::{IMG_PREFIX, TXT_PREFIX};
use crate::fusion::{fusion_stage, Head, PmfModel, SeqFeatures, PROMPT_INIT_STD};
use crate::rng::{self, stream};
use crate::training::Classifier;

/// Prompt length of the unimodal prompt baselines.
pub const BASELINE_PROMPT_LEN: usize = 10;

pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Linear,
    LateConcat,
    PromptImgOnly,
    PromptTxtOnly,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Linear,
        BaselineKind::LateConcat,
        BaselineKind::PromptImgOnly,
        BaselineKind::PromptTxtOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Linear => "linear",
            BaselineKind::LateConcat => "late_concat",
            BaselineKind::PromptImgOnly => "prompt_img_only",
            BaselineKind::PromptTxtOnly => "prompt_txt_only",
        }
    }
}

/// What a baseline consumes per record.
#[derive(Debug, Clone)]
pub enum BaselineInput {
    /// `[CLS_img | CLS_txt]` from frozen towers.
    Cls(Vec<f64>),
    Record(MultimodalRecord),
    /// Frozen embedding output of the prompted tower.
    Embedded(SeqFeatures),
}

#[derive(Debug, Clone)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub dtype: DType,
    pub store: ParamStore,
    pub img: Encoder,
    pub txt: Encoder,
    /// Deep prompts of the prompted tower, one per layer.
    pub prompts: Vec<ParamId>,
    pub head: Head,
}

impl BaselineModel {
    /// Towers are drawn from the same streams as [`PmfModel::new`], so equal
    /// seeds give equal backbones.
    pub fn new(
        kind: BaselineKind,
        img_cfg: &EncoderConfig,
        txt_cfg: &EncoderConfig,
        n_classes: usize,
        dtype: DType,
        seed: u64,
    ) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::Config("n_classes must be >= 1".into()));
        }
        let mut store = ParamStore::new();
        let img = Encoder::init(
            img_cfg,
            &mut store,
            IMG_PREFIX,
            dtype,
            &mut rng::substream(seed, stream::INIT_IMG),
        )?;
        let txt = Encoder::init(
            txt_cfg,
            &mut store,
            TXT_PREFIX,
            dtype,
            &mut rng::substream(seed, stream::INIT_TXT),
        )?;
        let late = kind == BaselineKind::LateConcat;
        img.set_trainable(&mut store, late);
        txt.set_trainable(&mut store, late);

        let mut prompts = Vec::new();
        let prompted = match kind {
            BaselineKind::PromptImgOnly => Some(img_cfg),
            BaselineKind::PromptTxtOnly => Some(txt_cfg),
            _ => None,
        };
        if let Some(cfg) = prompted {
            let mut prng = rng::substream(seed, stream::INIT_FUSION);
            for l in 0..cfg.layers {
                let data =
                    rng::gaussian_vec(&mut prng, BASELINE_PROMPT_LEN * cfg.d, 0.0, PROMPT_INIT_STD);
                let t = Tensor::new(vec![BASELINE_PROMPT_LEN, cfg.d], dtype, data)?
                    .with_requires_grad(true);
                prompts.push(store.insert(format!("prompt.layer{l}"), t));
            }
        }
        let d_in = match kind {
            BaselineKind::Linear | BaselineKind::LateConcat => img_cfg.d + txt_cfg.d,
            BaselineKind::PromptImgOnly => img_cfg.d,
            BaselineKind::PromptTxtOnly => txt_cfg.d,
        };
        let head = Head::init(
            &mut store,
            HEAD_PREFIX,
            d_in,
            n_classes,
            dtype,
            &mut rng::substream(seed, stream::INIT_HEAD),
        );
        Ok(BaselineModel {
            kind,
            dtype,
            store,
            img,
            txt,
            prompts,
            head,
        })
    }

    /// Copies pretrained tower weights in by name. Trainability is kept as
    /// the kind requires.
    pub fn load_backbones(
        &mut self,
        img: (&ParamStore, &str),
        txt: (&ParamStore, &str),
    ) -> Result<()> {
        self.store.copy_values_from(img.0, img.1, IMG_PREFIX)?;
        self.store.copy_values_from(txt.0, txt.1, TXT_PREFIX)?;
        let late = self.kind == BaselineKind::LateConcat;
        self.img.set_trainable(&mut self.store, late);
        self.txt.set_trainable(&mut self.store, late);
        Ok(())
    }

    fn prompted_tower(&self) -> Option<&Encoder> {
        match self.kind {
            BaselineKind::PromptImgOnly => Some(&self.img),
            BaselineKind::PromptTxtOnly => Some(&self.txt),
            _ => None,
        }
    }

    fn embed_tower(
        &self,
        tape: &mut Tape,
        enc: &Encoder,
        batch: &[&MultimodalRecord],
    ) -> Result<TokenSequence> {
        if std::ptr::eq(enc, &self.img) {
            if batch.iter().any(|r| r.image.is_empty()) {
                return Err(Error::Input(format!("{} needs an image input", self.kind.name())));
            }
            let images: Vec<&[f32]> = batch.iter().map(|r| r.image.as_slice()).collect();
            enc.embed_image(tape, &self.store, &images)
        } else {
            if batch.iter().any(|r| r.tokens.is_empty()) {
                return Err(Error::Input(format!("{} needs a text input", self.kind.name())));
            }
            let texts: Vec<&[u32]> = batch.iter().map(|r| r.tokens.as_slice()).collect();
            enc.embed_text(tape, &self.store, &texts)
        }
    }

    /// `[CLS_img | CLS_txt]` after both full towers.
    fn concat_cls(&self, tape: &mut Tape, batch: &[&MultimodalRecord]) -> Result<Var> {
        let mut cls = Vec::with_capacity(2);
        for enc in [&self.img, &self.txt] {
            let seq = self.embed_tower(tape, enc, batch)?;
            let out = enc.encode_range(tape, &self.store, &seq, 0, enc.config.layers)?;
            cls.push(tape.gather_rows(&[out.tokens], out.cls_rows())?);
        }
        tape.concat_cols(cls[0], cls[1])
    }

    /// Deep-prompted pass over the prompted tower.
    fn prompted_cls(&self, tape: &mut Tape, enc: &Encoder, mut seq: TokenSequence) -> Result<Var> {
        for (l, &p) in self.prompts.iter().enumerate() {
            let p = tape.param(&self.store, p);
            seq = fusion_stage(tape, enc, &self.store, l, &seq, Some(p), None)?;
        }
        tape.gather_rows(&[seq.tokens], seq.cls_rows())
    }

    /// Logits straight from records.
    pub fn forward(&self, tape: &mut Tape, batch: &[&MultimodalRecord]) -> Result<Var> {
        let x = match self.prompted_tower() {
            Some(enc) => {
                let seq = self.embed_tower(tape, enc, batch)?;
                self.prompted_cls(tape, enc, seq)?
            }
            None => self.concat_cls(tape, batch)?,
        };
        self.head.forward(tape, &self.store, x)
    }
}

impl Classifier for BaselineModel {
    type Prepared = BaselineInput;

    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn dtype(&self) -> DType {
        self.dtype
    }
    fn n_outputs(&self) -> usize {
        self.head.n_out
    }

    /// Caches whatever lies below the first trainable parameter.
    fn prepare(&self, records: &[MultimodalRecord]) -> Result<Vec<BaselineInput>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(64) {
            let refs: Vec<&MultimodalRecord> = chunk.iter().collect();
            let mut tape = Tape::new(self.dtype);
            match self.kind {
                BaselineKind::LateConcat => {
                    out.extend(chunk.iter().cloned().map(BaselineInput::Record))
                }
                BaselineKind::Linear => {
                    let x = tape.no_grad(|t| self.concat_cls(t, &refs))?;
                    let w = tape.dims(x).1;
                    out.extend(tape.value(x).chunks(w).map(|r| BaselineInput::Cls(r.to_vec())));
                }
                BaselineKind::PromptImgOnly | BaselineKind::PromptTxtOnly => {
                    let enc = self.prompted_tower().expect("prompt kind");
                    let seq = tape.no_grad(|t| self.embed_tower(t, enc, &refs))?;
                    out.extend(SeqFeatures::split(&tape, &seq).into_iter().map(BaselineInput::Embedded));
                }
            }
        }
        Ok(out)
    }

    fn forward_prepared(&self, tape: &mut Tape, batch: &[&BaselineInput]) -> Result<Var> {
        let mismatch = || Error::Input(format!("input not prepared for {}", self.kind.name()));
        let x = match self.kind {
            BaselineKind::LateConcat => {
                let recs = batch
                    .iter()
                    .map(|b| match b {
                        BaselineInput::Record(r) => Ok(r),
                        _ => Err(mismatch()),
                    })
                    .collect::<Result<Vec<_>>>()?;
                self.concat_cls(tape, &recs)?
            }
            BaselineKind::Linear => {
                let mut data = Vec::new();
                for b in batch {
                    let BaselineInput::Cls(v) = b else { return Err(mismatch()) };
                    data.extend_from_slice(v);
                }
                tape.constant(batch.len(), self.head.d_in, data)?
            }
            BaselineKind::PromptImgOnly | BaselineKind::PromptTxtOnly => {
                let feats = batch
                    .iter()
                    .map(|b| match b {
                        BaselineInput::Embedded(f) => Ok(f),
                        _ => Err(mismatch()),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let seq = SeqFeatures::stack(tape, &feats)?;
                let enc = self.prompted_tower().expect("prompt kind");
                self.prompted_cls(tape, enc, seq)?
            }
        };
        self.head.forward(tape, &self.store, x)
    }
}

/// Names of the parameters `kind` trains, in store order.
pub fn trainable_set(model: &BaselineModel) -> Vec<String> {
    model.store.trainable_names()
}

/// Sets the dual heads of a PMF model without fusion layers so that its
/// averaged logits equal the concatenated head's: the vision and text heads
/// take twice the vision and text row blocks of `W`, and both take `b`.
pub fn match_pmf_heads(linear: &BaselineModel, pmf: &mut PmfModel) -> Result<()> {
    let (d_img, d_txt) = (pmf.head_img.d_in, pmf.head_txt.d_in);
    let n = linear.head.n_out;
    if linear.head.d_in != d_img + d_txt || pmf.head_img.n_out != n {
        return Err(Error::shape("match_pmf_heads", "head shapes do not correspond"));
    }
    let w = linear.store.get(linear.head.w).data();
    let b = linear.store.get(linear.head.b).data().to_vec();
    let w_img: Vec<f64> = w[..d_img * n].iter().map(|v| 2.0 * v).collect();
    let w_txt: Vec<f64> = w[d_img * n..].iter().map(|v| 2.0 * v).collect();
    pmf.store.get_mut(pmf.head_img.w).set_data(w_img)?;
    pmf.store.get_mut(pmf.head_txt.w).set_data(w_txt)?;
    pmf.store.get_mut(pmf.head_img.b).set_data(b.clone())?;
    pmf.store.get_mut(pmf.head_txt.b).set_data(b)?;
    Ok(())
}
