//! The two-tower prompt fusion model.
//!
//! For each fused layer `k`, with vision layer `lf_img + k` and text layer
//! `lf_txt + k`:
//!
//! 1. *query*: each tower runs its layer on `[z | qcp | qp]` and keeps only the
//!    outputs at the query-prompt positions;
//! 2. *map*: the queried rows are carried into the other tower's space;
//! 3. *fuse*: each tower runs the same layer again on
//!    `[z | fcp | mapped rows from the other tower]`, keeping only the rows of
//!    `z`.
//!
//! Both stages consume the layer input `z`, so each fused layer executes every
//! unimodal layer twice. Layers below the fusion start run untracked.

use crate::autograd::{DType, ParamId, ParamStore, Tape, Tensor, Var};
use crate::datagen::MultimodalRecord;
use crate::encoder::{Encoder, EncoderConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::fusion::config::FusionConfig;
use crate::fusion::head::Head;
use crate::fusion::mapping::Mapping;
use crate::fusion::prompts::PromptBank;
use crate::rng::{self, stream};

/// Parameter handles of one tower's prompts at one fused layer.
#[derive(Debug, Clone, Default)]
pub struct PromptIds {
    pub qp: Option<ParamId>,
    pub qcp: Option<ParamId>,
    pub fcp: Option<ParamId>,
}

impl PromptIds {
    fn ids(&self) -> impl Iterator<Item = ParamId> {
        [self.qp, self.qcp, self.fcp].into_iter().flatten()
    }
}

#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub img: PromptIds,
    pub txt: PromptIds,
    /// `f`: vision space to text space.
    pub img_to_txt: Mapping,
    /// `f'`: text space to vision space.
    pub txt_to_img: Mapping,
}

/// Frozen per-sample features of one tower at its fusion start layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqFeatures {
    pub data: Vec<f64>,
    pub seq_len: usize,
    pub d: usize,
    pub mask: Vec<bool>,
}

impl SeqFeatures {
    /// Splits a batched sequence into per-sample features.
    pub fn split(tape: &Tape, seq: &TokenSequence) -> Vec<SeqFeatures> {
        let d = tape.dims(seq.tokens).1;
        let data = tape.value(seq.tokens);
        (0..seq.batch)
            .map(|b| {
                let rows = b * seq.seq_len..(b + 1) * seq.seq_len;
                SeqFeatures {
                    data: data[rows.start * d..rows.end * d].to_vec(),
                    seq_len: seq.seq_len,
                    d,
                    mask: seq.mask[rows].to_vec(),
                }
            })
            .collect()
    }

    /// Stacks features into a constant batched sequence.
    pub fn stack(tape: &mut Tape, feats: &[&SeqFeatures]) -> Result<TokenSequence> {
        let first = feats
            .first()
            .ok_or_else(|| Error::Input("empty feature batch".into()))?;
        let (seq_len, d) = (first.seq_len, first.d);
        let mut data = Vec::with_capacity(feats.len() * seq_len * d);
        let mut mask = Vec::with_capacity(feats.len() * seq_len);
        for f in feats {
            if f.seq_len != seq_len || f.d != d {
                return Err(Error::shape("stack features", "ragged feature batch"));
            }
            data.extend_from_slice(&f.data);
            mask.extend_from_slice(&f.mask);
        }
        let tokens = tape.constant(feats.len() * seq_len, d, data)?;
        Ok(TokenSequence {
            tokens,
            batch: feats.len(),
            seq_len,
            mask,
        })
    }
}

/// Both towers' frozen features for one sample.
pub type BaseFeatures = (SeqFeatures, SeqFeatures);

#[derive(Debug, Clone)]
pub struct PmfModel {
    pub dtype: DType,
    pub fusion: FusionConfig,
    pub store: ParamStore,
    pub img: Encoder,
    pub txt: Encoder,
    pub layers: Vec<FusionLayer>,
    pub head_img: Head,
    pub head_txt: Head,
}

pub const IMG_PREFIX: &str = "img.";
pub const TXT_PREFIX: &str = "txt.";

impl PmfModel {
    /// Builds a model with randomly initialized (then frozen) backbones.
    /// Load pretrained towers with [`PmfModel::load_backbones`].
    pub fn new(
        img_cfg: &EncoderConfig,
        txt_cfg: &EncoderConfig,
        fusion: &FusionConfig,
        dtype: DType,
        seed: u64,
    ) -> Result<Self> {
        fusion.validate(img_cfg, txt_cfg)?;
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
        img.set_trainable(&mut store, false);
        txt.set_trainable(&mut store, false);

        let n_fused = fusion.fusion_layers(img_cfg);
        let (di, dt) = (img_cfg.d, txt_cfg.d);
        let mut frng = rng::substream(seed, stream::INIT_FUSION);
        let bank = PromptBank::init(fusion, n_fused, di, dt, dtype, &mut frng)?;
        let mut layers = Vec::with_capacity(n_fused);
        for (k, lp) in bank.layers.into_iter().enumerate() {
            let mut reg = |tower: &str, kind: &str, t: Option<Tensor>| {
                t.map(|t| store.insert(format!("fusion.layer{k}.{tower}.{kind}"), t))
            };
            let img_ids = PromptIds {
                qp: reg("img", "qp", lp.img.qp),
                qcp: reg("img", "qcp", lp.img.qcp),
                fcp: reg("img", "fcp", lp.img.fcp),
            };
            let txt_ids = PromptIds {
                qp: reg("txt", "qp", lp.txt.qp),
                qcp: reg("txt", "qcp", lp.txt.qcp),
                fcp: reg("txt", "fcp", lp.txt.fcp),
            };
            let img_to_txt = Mapping::init(
                fusion.mapping,
                &mut store,
                &format!("fusion.layer{k}.map_img2txt."),
                di,
                fusion.bottleneck_dim(di, dt),
                dt,
                dtype,
                &mut frng,
            )?;
            let txt_to_img = Mapping::init(
                fusion.mapping,
                &mut store,
                &format!("fusion.layer{k}.map_txt2img."),
                dt,
                fusion.bottleneck_dim(dt, di),
                di,
                dtype,
                &mut frng,
            )?;
            layers.push(FusionLayer {
                img: img_ids,
                txt: txt_ids,
                img_to_txt,
                txt_to_img,
            });
        }
        let mut hrng = rng::substream(seed, stream::INIT_HEAD);
        let head_img = Head::init(&mut store, "head_img.", di, fusion.n_classes, dtype, &mut hrng);
        let head_txt = Head::init(&mut store, "head_txt.", dt, fusion.n_classes, dtype, &mut hrng);
        Ok(PmfModel {
            dtype,
            fusion: fusion.clone(),
            store,
            img,
            txt,
            layers,
            head_img,
            head_txt,
        })
    }

    /// Re-binds a model to a store loaded from a checkpoint.
    pub fn from_store(
        img_cfg: &EncoderConfig,
        txt_cfg: &EncoderConfig,
        fusion: &FusionConfig,
        store: ParamStore,
    ) -> Result<Self> {
        fusion.validate(img_cfg, txt_cfg)?;
        let dtype = store
            .iter()
            .next()
            .map(|(_, _, t)| t.dtype())
            .ok_or_else(|| Error::Checkpoint("empty parameter store".into()))?;
        let img = Encoder::attach(img_cfg, &store, IMG_PREFIX)?;
        let txt = Encoder::attach(txt_cfg, &store, TXT_PREFIX)?;
        let (di, dt) = (img_cfg.d, txt_cfg.d);
        let mut layers = Vec::new();
        for k in 0..fusion.fusion_layers(img_cfg) {
            let get = |tower: &str, kind: &str, m: usize| -> Result<Option<ParamId>> {
                if m == 0 {
                    return Ok(None);
                }
                let name = format!("fusion.layer{k}.{tower}.{kind}");
                store.index_of(&name).map(Some).ok_or(Error::UnknownParam(name))
            };
            let prompts = |tower: &str| -> Result<PromptIds> {
                Ok(PromptIds {
                    qp: get(tower, "qp", fusion.m_qp)?,
                    qcp: get(tower, "qcp", fusion.m_qcp)?,
                    fcp: get(tower, "fcp", fusion.m_fcp)?,
                })
            };
            layers.push(FusionLayer {
                img: prompts("img")?,
                txt: prompts("txt")?,
                img_to_txt: Mapping::attach(
                    fusion.mapping,
                    &store,
                    &format!("fusion.layer{k}.map_img2txt."),
                    di,
                    fusion.bottleneck_dim(di, dt),
                    dt,
                )?,
                txt_to_img: Mapping::attach(
                    fusion.mapping,
                    &store,
                    &format!("fusion.layer{k}.map_txt2img."),
                    dt,
                    fusion.bottleneck_dim(dt, di),
                    di,
                )?,
            });
        }
        let head_img = Head::attach(&store, "head_img.")?;
        let head_txt = Head::attach(&store, "head_txt.")?;
        Ok(PmfModel {
            dtype,
            fusion: fusion.clone(),
            store,
            img,
            txt,
            layers,
            head_img,
            head_txt,
        })
    }

    /// Copies pretrained tower weights in by name and keeps them frozen.
    pub fn load_backbones(
        &mut self,
        img: (&ParamStore, &str),
        txt: (&ParamStore, &str),
    ) -> Result<()> {
        self.store.copy_values_from(img.0, img.1, IMG_PREFIX)?;
        self.store.copy_values_from(txt.0, txt.1, TXT_PREFIX)?;
        self.img.set_trainable(&mut self.store, false);
        self.txt.set_trainable(&mut self.store, false);
        Ok(())
    }

    pub fn prompt_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| l.img.ids().chain(l.txt.ids()))
            .collect()
    }

    pub fn mapping_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| l.img_to_txt.param_ids().into_iter().chain(l.txt_to_img.param_ids()))
            .collect()
    }

    pub fn head_ids(&self) -> Vec<ParamId> {
        self.head_img
            .param_ids()
            .into_iter()
            .chain(self.head_txt.param_ids())
            .collect()
    }

    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let mut ids = self.img.param_ids();
        ids.extend(self.txt.param_ids());
        ids
    }

    pub fn fusion_layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Embeds both modalities of a batch.
    pub fn embed(
        &self,
        tape: &mut Tape,
        batch: &[&MultimodalRecord],
    ) -> Result<(TokenSequence, TokenSequence)> {
        let images: Vec<&[f32]> = batch.iter().map(|r| r.image.as_slice()).collect();
        let texts: Vec<&[u32]> = batch.iter().map(|r| r.tokens.as_slice()).collect();
        let zi = self.img.embed_image(tape, &self.store, &images)?;
        let zt = self.txt.embed_text(tape, &self.store, &texts)?;
        Ok((zi, zt))
    }

    /// Embedding plus the frozen layers below the fusion start, untracked.
    pub fn base_sequences(
        &self,
        tape: &mut Tape,
        batch: &[&MultimodalRecord],
    ) -> Result<(TokenSequence, TokenSequence)> {
        tape.no_grad(|tape| {
            let (zi, zt) = self.embed(tape, batch)?;
            let zi = self.img.encode_base(tape, &self.store, &zi, self.fusion.lf_img)?;
            let zt = self.txt.encode_base(tape, &self.store, &zt, self.fusion.lf_txt)?;
            Ok((zi, zt))
        })
    }

    /// Per-sample frozen features, reusable across epochs while the
    /// backbones stay frozen.
    pub fn base_features(&self, batch: &[&MultimodalRecord]) -> Result<Vec<BaseFeatures>> {
        let mut tape = Tape::new(self.dtype);
        let (zi, zt) = self.base_sequences(&mut tape, batch)?;
        let fi = SeqFeatures::split(&tape, &zi);
        let ft = SeqFeatures::split(&tape, &zt);
        Ok(fi.into_iter().zip(ft).collect())
    }

    pub fn forward(&self, tape: &mut Tape, batch: &[&MultimodalRecord]) -> Result<Var> {
        let (zi, zt) = self.base_sequences(tape, batch)?;
        self.forward_fused(tape, zi, zt)
    }

    pub fn forward_features(&self, tape: &mut Tape, feats: &[&BaseFeatures]) -> Result<Var> {
        let fi: Vec<&SeqFeatures> = feats.iter().map(|f| &f.0).collect();
        let ft: Vec<&SeqFeatures> = feats.iter().map(|f| &f.1).collect();
        let zi = SeqFeatures::stack(tape, &fi)?;
        let zt = SeqFeatures::stack(tape, &ft)?;
        self.forward_fused(tape, zi, zt)
    }

    /// Runs all fused layers from the base sequences and applies the heads.
    pub fn forward_fused(
        &self,
        tape: &mut Tape,
        mut zi: TokenSequence,
        mut zt: TokenSequence,
    ) -> Result<Var> {
        for k in 0..self.layers.len() {
            (zi, zt) = self.fusion_layer_forward(tape, k, &zi, &zt)?;
        }
        let (ci, ct) = self.cls_features(tape, &zi, &zt)?;
        self.dual_head(tape, ci, ct)
    }

    pub fn cls_features(
        &self,
        tape: &mut Tape,
        zi: &TokenSequence,
        zt: &TokenSequence,
    ) -> Result<(Var, Var)> {
        let ci = tape.gather_rows(&[zi.tokens], zi.cls_rows())?;
        let ct = tape.gather_rows(&[zt.tokens], zt.cls_rows())?;
        Ok((ci, ct))
    }

    /// `(head_img(cls_img) + head_txt(cls_txt)) / 2`
    pub fn dual_head(&self, tape: &mut Tape, cls_img: Var, cls_txt: Var) -> Result<Var> {
        let li = self.head_img.forward(tape, &self.store, cls_img)?;
        let lt = self.head_txt.forward(tape, &self.store, cls_txt)?;
        let sum = tape.add(li, lt)?;
        Ok(tape.scale(sum, 0.5))
    }

    /// Fused layer `k` on both towers.
    pub fn fusion_layer_forward(
        &self,
        tape: &mut Tape,
        k: usize,
        zi: &TokenSequence,
        zt: &TokenSequence,
    ) -> Result<(TokenSequence, TokenSequence)> {
        let fl = self
            .layers
            .get(k)
            .ok_or_else(|| Error::Input(format!("fusion layer {k} out of range")))?;
        if zi.batch != zt.batch {
            return Err(Error::shape("fusion_layer", "towers have different batch sizes"));
        }
        let (li, lt) = (self.fusion.lf_img + k, self.fusion.lf_txt + k);
        let s = &self.store;
        let p = |tape: &mut Tape, id: Option<ParamId>| id.map(|id| tape.param(s, id));

        let (qcp_i, qp_i) = (p(tape, fl.img.qcp), p(tape, fl.img.qp));
        let (qcp_t, qp_t) = (p(tape, fl.txt.qcp), p(tape, fl.txt.qp));
        let queried_i = match qp_i {
            Some(qp) => Some(querying_stage(tape, &self.img, s, li, zi, qcp_i, qp)?),
            None => None,
        };
        let queried_t = match qp_t {
            Some(qp) => Some(querying_stage(tape, &self.txt, s, lt, zt, qcp_t, qp)?),
            None => None,
        };
        let y_to_txt = queried_i
            .map(|q| fl.img_to_txt.map_intermediate(tape, s, q))
            .transpose()?;
        let y_to_img = queried_t
            .map(|q| fl.txt_to_img.map_intermediate(tape, s, q))
            .transpose()?;

        let (fcp_i, fcp_t) = (p(tape, fl.img.fcp), p(tape, fl.txt.fcp));
        let next_i = fusion_stage(tape, &self.img, s, li, zi, fcp_i, y_to_img)?;
        let next_t = fusion_stage(tape, &self.txt, s, lt, zt, fcp_t, y_to_txt)?;
        Ok((next_i, next_t))
    }
}

/// Runs layer `l` on `[z | qcp | qp]` per sequence and returns the output
/// rows at the query-prompt positions, `batch * m_qp` rows.
pub fn querying_stage(
    tape: &mut Tape,
    encoder: &Encoder,
    store: &ParamStore,
    l: usize,
    z: &TokenSequence,
    qcp: Option<Var>,
    qp: Var,
) -> Result<Var> {
    let m_qp = tape.dims(qp).0;
    let (x, seq_len, mask) = append_rows(tape, z, &[qcp, Some(qp)])?;
    let out = encoder.layer_forward(tape, store, l, x, seq_len, &mask)?;
    let start = seq_len - m_qp;
    let rows = (0..z.batch)
        .flat_map(|b| (0..m_qp).map(move |i| (0, (b * seq_len + start + i) as u32)))
        .collect();
    tape.gather_rows(&[out], rows)
}

/// Runs layer `l` on `[z | fcp | y]` per sequence and keeps the rows of `z`.
/// `y` holds `batch * m` rows, `m` per sequence.
pub fn fusion_stage(
    tape: &mut Tape,
    encoder: &Encoder,
    store: &ParamStore,
    l: usize,
    z: &TokenSequence,
    fcp: Option<Var>,
    y: Option<Var>,
) -> Result<TokenSequence> {
    if fcp.is_none() && y.is_none() {
        return encoder.transformer_layer(tape, store, l, z);
    }
    let per_sample = match y {
        Some(y) => {
            let rows = tape.dims(y).0;
            if !rows.is_multiple_of(z.batch) {
                return Err(Error::shape("fusion_stage", "intermediate rows not divisible by batch"));
            }
            rows / z.batch
        }
        None => 0,
    };
    let (x, seq_len, mask) = append_rows_batched(tape, z, fcp, y, per_sample)?;
    let out = encoder.layer_forward(tape, store, l, x, seq_len, &mask)?;
    let rows = (0..z.batch)
        .flat_map(|b| (0..z.seq_len).map(move |i| (0, (b * seq_len + i) as u32)))
        .collect();
    let tokens = tape.gather_rows(&[out], rows)?;
    Ok(z.with_tokens(tokens))
}

/// Appends shared prompt rows after every sequence of `z`.
fn append_rows(
    tape: &mut Tape,
    z: &TokenSequence,
    shared: &[Option<Var>],
) -> Result<(Var, usize, Vec<bool>)> {
    let d = tape.dims(z.tokens).1;
    let mut inputs = vec![z.tokens];
    let mut extra = Vec::new();
    for v in shared.iter().flatten() {
        if tape.dims(*v).1 != d {
            return Err(Error::shape(
                "prompt concat",
                format!("prompt width {} vs token width {d}", tape.dims(*v).1),
            ));
        }
        inputs.push(*v);
        extra.push((inputs.len() as u32 - 1, tape.dims(*v).0));
    }
    let added: usize = extra.iter().map(|e| e.1).sum();
    let seq_len = z.seq_len + added;
    let mut src = Vec::with_capacity(z.batch * seq_len);
    let mut mask = Vec::with_capacity(z.batch * seq_len);
    for b in 0..z.batch {
        for i in 0..z.seq_len {
            src.push((0, (b * z.seq_len + i) as u32));
            mask.push(z.mask[b * z.seq_len + i]);
        }
        for &(input, rows) in &extra {
            for r in 0..rows {
                src.push((input, r as u32));
                mask.push(true);
            }
        }
    }
    Ok((tape.gather_rows(&inputs, src)?, seq_len, mask))
}

/// Like [`append_rows`] with one shared block followed by a per-sequence
/// block of `per_sample` rows taken from `y`.
fn append_rows_batched(
    tape: &mut Tape,
    z: &TokenSequence,
    shared: Option<Var>,
    y: Option<Var>,
    per_sample: usize,
) -> Result<(Var, usize, Vec<bool>)> {
    let d = tape.dims(z.tokens).1;
    let mut inputs = vec![z.tokens];
    let shared_rows = match shared {
        Some(v) => {
            if tape.dims(v).1 != d {
                return Err(Error::shape("prompt concat", "prompt width differs from tokens"));
            }
            inputs.push(v);
            tape.dims(v).0
        }
        None => 0,
    };
    let y_input = match y {
        Some(v) => {
            if tape.dims(v).1 != d {
                return Err(Error::shape(
                    "fusion_stage",
                    format!("intermediate width {} vs token width {d}", tape.dims(v).1),
                ));
            }
            inputs.push(v);
            inputs.len() as u32 - 1
        }
        None => 0,
    };
    let seq_len = z.seq_len + shared_rows + per_sample;
    let mut src = Vec::with_capacity(z.batch * seq_len);
    let mut mask = Vec::with_capacity(z.batch * seq_len);
    for b in 0..z.batch {
        for i in 0..z.seq_len {
            src.push((0, (b * z.seq_len + i) as u32));
            mask.push(z.mask[b * z.seq_len + i]);
        }
        for r in 0..shared_rows {
            src.push((1, r as u32));
            mask.push(true);
        }
        for r in 0..per_sample {
            src.push((y_input, (b * per_sample + r) as u32));
            mask.push(true);
        }
    }
    Ok((tape.gather_rows(&inputs, src)?, seq_len, mask))
}

impl crate::training::Classifier for PmfModel {
    type Prepared = BaseFeatures;

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
        self.fusion.n_classes
    }

    /// Frozen features below the fusion start, computed once per record.
    fn prepare(&self, records: &[MultimodalRecord]) -> Result<Vec<BaseFeatures>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(64) {
            let refs: Vec<&MultimodalRecord> = chunk.iter().collect();
            out.extend(self.base_features(&refs)?);
        }
        Ok(out)
    }

    fn forward_prepared(&self, tape: &mut Tape, batch: &[&BaseFeatures]) -> Result<Var> {
        self.forward_features(tape, batch)
    }
}
