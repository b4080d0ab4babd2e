//! Toy unimodal transformers.
//!
//! Both towers use pre-norm layers (`x + MHSA(LN(x))`, then `x + MLP(LN(x))`)
//! with a GELU MLP and learned absolute positional embeddings. A batch of
//! sequences is stacked row-wise into one matrix of `batch * seq_len` rows.

use serde::{Deserialize, Serialize};

use crate::autograd::{DType, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Token id used to fill positions past the end of a text sequence.
pub const PAD_ID: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "lowercase", deny_unknown_fields)]
pub enum InputConfig {
    Vision {
        height: usize,
        width: usize,
        channels: usize,
        patch: usize,
    },
    Text {
        vocab_size: usize,
        max_len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
    pub input: InputConfig,
}

fn default_mlp_ratio() -> usize {
    2
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl EncoderConfig {
    pub fn vision_default() -> Self {
        EncoderConfig {
            layers: 4,
            d: 32,
            heads: 4,
            mlp_ratio: 2,
            layer_norm_eps: 1e-5,
            input: InputConfig::Vision {
                height: 32,
                width: 32,
                channels: 1,
                patch: 8,
            },
        }
    }

    pub fn text_default() -> Self {
        EncoderConfig {
            layers: 4,
            d: 24,
            heads: 4,
            mlp_ratio: 2,
            layer_norm_eps: 1e-5,
            input: InputConfig::Text {
                vocab_size: 64,
                max_len: 16,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.d == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("encoder layers, d, heads and mlp_ratio must be >= 1".into());
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        match self.input {
            InputConfig::Vision {
                height,
                width,
                channels,
                patch,
            } => {
                if patch == 0 || channels == 0 || height == 0 || width == 0 {
                    return bad("image dimensions and patch size must be >= 1".into());
                }
                if !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
                    return bad(format!("image {height}x{width} is not divisible by patch {patch}"));
                }
            }
            InputConfig::Text {
                vocab_size,
                max_len,
            } => {
                if vocab_size < 2 || max_len == 0 {
                    return bad("text needs vocab_size >= 2 and max_len >= 1".into());
                }
            }
        }
        Ok(())
    }

    /// Number of non-CLS tokens per sequence.
    pub fn num_tokens(&self) -> usize {
        match self.input {
            InputConfig::Vision {
                height,
                width,
                patch,
                ..
            } => (height / patch) * (width / patch),
            InputConfig::Text { max_len, .. } => max_len,
        }
    }

    /// Sequence length including CLS.
    pub fn seq_len(&self) -> usize {
        self.num_tokens() + 1
    }

    fn input_width(&self) -> usize {
        match self.input {
            InputConfig::Vision {
                channels, patch, ..
            } => patch * patch * channels,
            InputConfig::Text { vocab_size, .. } => vocab_size,
        }
    }
}

/// A batch of token sequences stacked row-wise: `batch * seq_len` rows.
/// Row 0 of every sequence is the CLS token. `mask[r]` is false on padding.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Var,
    pub batch: usize,
    pub seq_len: usize,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn with_tokens(&self, tokens: Var) -> TokenSequence {
        TokenSequence {
            tokens,
            ..self.clone()
        }
    }

    /// Row indices of the CLS token of every sequence.
    pub fn cls_rows(&self) -> Vec<(u32, u32)> {
        (0..self.batch).map(|b| (0, (b * self.seq_len) as u32)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w_up: ParamId,
    pub b_up: ParamId,
    pub w_down: ParamId,
    pub b_down: ParamId,
}

/// Parameter handles of one tower inside a shared [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub prefix: String,
    pub embed: ParamId,
    pub pos: ParamId,
    pub cls: ParamId,
    pub layers: Vec<LayerParams>,
}

const LAYER_PARAMS: [&str; 16] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.gain", "ln2.bias", "mlp.w_up", "mlp.b_up", "mlp.w_down",
    "mlp.b_down",
];

impl Encoder {
    /// Registers freshly initialized parameters under `prefix` (e.g. `"img."`).
    /// Weights are `N(0, 1/fan_in)`, embeddings `N(0, 0.02^2)`, biases zero,
    /// layer-norm gains one. All parameters start trainable.
    pub fn init(
        config: &EncoderConfig,
        store: &mut ParamStore,
        prefix: &str,
        dtype: DType,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let hidden = d * config.mlp_ratio;
        let mut add = |name: &str, shape: Vec<usize>, init: Init, rng: &mut Rng| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => rng::gaussian_vec(rng, n, 0.0, std),
            };
            let t = Tensor::new(shape, dtype, data).unwrap().with_requires_grad(true);
            store.insert(format!("{prefix}{name}"), t)
        };
        let embed_std = match config.input {
            InputConfig::Vision { .. } => 1.0 / (config.input_width() as f64).sqrt(),
            InputConfig::Text { .. } => 0.02,
        };
        let embed = add("embed", vec![config.input_width(), d], Init::Normal(embed_std), rng);
        let pos = add("pos", vec![config.seq_len(), d], Init::Normal(0.02), rng);
        let cls = add("cls", vec![1, d], Init::Normal(0.02), rng);
        let w = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut p = |name: &str, shape: Vec<usize>, init: Init, rng: &mut Rng| {
                add(&format!("layer{l}.{name}"), shape, init, rng)
            };
            layers.push(LayerParams {
                ln1_gain: p("ln1.gain", vec![1, d], Init::Ones, rng),
                ln1_bias: p("ln1.bias", vec![1, d], Init::Zeros, rng),
                wq: p("attn.wq", vec![d, d], w(d), rng),
                bq: p("attn.bq", vec![1, d], Init::Zeros, rng),
                wk: p("attn.wk", vec![d, d], w(d), rng),
                bk: p("attn.bk", vec![1, d], Init::Zeros, rng),
                wv: p("attn.wv", vec![d, d], w(d), rng),
                bv: p("attn.bv", vec![1, d], Init::Zeros, rng),
                wo: p("attn.wo", vec![d, d], w(d), rng),
                bo: p("attn.bo", vec![1, d], Init::Zeros, rng),
                ln2_gain: p("ln2.gain", vec![1, d], Init::Ones, rng),
                ln2_bias: p("ln2.bias", vec![1, d], Init::Zeros, rng),
                w_up: p("mlp.w_up", vec![d, hidden], w(d), rng),
                b_up: p("mlp.b_up", vec![1, hidden], Init::Zeros, rng),
                w_down: p("mlp.w_down", vec![hidden, d], w(hidden), rng),
                b_down: p("mlp.b_down", vec![1, d], Init::Zeros, rng),
            });
        }
        Ok(Encoder {
            config: config.clone(),
            prefix: prefix.to_string(),
            embed,
            pos,
            cls,
            layers,
        })
    }

    /// Looks up an encoder previously registered under `prefix`.
    pub fn attach(config: &EncoderConfig, store: &ParamStore, prefix: &str) -> Result<Self> {
        config.validate()?;
        let find = |name: &str| {
            let full = format!("{prefix}{name}");
            store.index_of(&full).ok_or(Error::UnknownParam(full))
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let ids = LAYER_PARAMS
                .iter()
                .map(|n| find(&format!("layer{l}.{n}")))
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerParams {
                ln1_gain: ids[0],
                ln1_bias: ids[1],
                wq: ids[2],
                bq: ids[3],
                wk: ids[4],
                bk: ids[5],
                wv: ids[6],
                bv: ids[7],
                wo: ids[8],
                bo: ids[9],
                ln2_gain: ids[10],
                ln2_bias: ids[11],
                w_up: ids[12],
                b_up: ids[13],
                w_down: ids[14],
                b_down: ids[15],
            });
        }
        let enc = Encoder {
            config: config.clone(),
            prefix: prefix.to_string(),
            embed: find("embed")?,
            pos: find("pos")?,
            cls: find("cls")?,
            layers,
        };
        let expect = [
            (enc.embed, vec![config.input_width(), config.d]),
            (enc.pos, vec![config.seq_len(), config.d]),
            (enc.cls, vec![1, config.d]),
        ];
        for (id, shape) in expect {
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::shape(
                    "encoder attach",
                    format!("{}: {:?} vs {shape:?}", store.name(id), store.get(id).shape()),
                ));
            }
        }
        Ok(enc)
    }

    /// Every parameter of this tower.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed, self.pos, self.cls];
        for l in &self.layers {
            ids.extend([
                l.ln1_gain, l.ln1_bias, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo,
                l.ln2_gain, l.ln2_bias, l.w_up, l.b_up, l.w_down, l.b_down,
            ]);
        }
        ids
    }

    pub fn set_trainable(&self, store: &mut ParamStore, trainable: bool) {
        for id in self.param_ids() {
            store.get_mut(id).set_requires_grad(trainable);
        }
    }

    pub fn is_frozen(&self, store: &ParamStore) -> bool {
        self.param_ids().iter().all(|&id| !store.get(id).requires_grad())
    }

    /// Splits images (`height x width x channels`, row-major) into flattened
    /// non-overlapping patches, projects them, prepends CLS and adds
    /// positional embeddings.
    pub fn embed_image(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        images: &[&[f32]],
    ) -> Result<TokenSequence> {
        let InputConfig::Vision {
            height,
            width,
            channels,
            patch,
        } = self.config.input
        else {
            return Err(Error::Input("embed_image called on a text encoder".into()));
        };
        if images.is_empty() {
            return Err(Error::Input("empty image batch".into()));
        }
        let patches = patchify(images, height, width, channels, patch)?;
        let n_patch = self.config.num_tokens();
        let pw = patch * patch * channels;
        let x = tape.constant(images.len() * n_patch, pw, patches)?;
        let w = tape.param(store, self.embed);
        let proj = tape.matmul(x, w)?;
        self.finish_embedding(tape, store, proj, images.len(), vec![true; images.len() * (n_patch + 1)])
    }

    /// Looks up token embeddings, pads every sequence to `max_len`, prepends
    /// CLS and adds positional embeddings. Padding rows are masked out.
    pub fn embed_text(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        token_ids: &[&[u32]],
    ) -> Result<TokenSequence> {
        let InputConfig::Text {
            vocab_size,
            max_len,
        } = self.config.input
        else {
            return Err(Error::Input("embed_text called on a vision encoder".into()));
        };
        if token_ids.is_empty() {
            return Err(Error::Input("empty text batch".into()));
        }
        let mut rows = Vec::with_capacity(token_ids.len() * max_len);
        let mut mask = Vec::with_capacity(token_ids.len() * (max_len + 1));
        for ids in token_ids {
            if ids.len() > max_len {
                return Err(Error::Input(format!(
                    "text of length {} exceeds max_len {max_len}",
                    ids.len()
                )));
            }
            if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab_size) {
                return Err(Error::Input(format!("token id {bad} >= vocab_size {vocab_size}")));
            }
            mask.push(true);
            for i in 0..max_len {
                rows.push((0, ids.get(i).copied().unwrap_or(PAD_ID)));
                mask.push(i < ids.len());
            }
        }
        let e = tape.param(store, self.embed);
        let emb = tape.gather_rows(&[e], rows)?;
        self.finish_embedding(tape, store, emb, token_ids.len(), mask)
    }

    fn finish_embedding(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: Var,
        batch: usize,
        mask: Vec<bool>,
    ) -> Result<TokenSequence> {
        let n = self.config.num_tokens();
        let seq_len = n + 1;
        let cls = tape.param(store, self.cls);
        let src = (0..batch)
            .flat_map(|b| {
                std::iter::once((0, 0)).chain((0..n).map(move |i| (1, (b * n + i) as u32)))
            })
            .collect();
        let with_cls = tape.gather_rows(&[cls, tokens], src)?;
        let pos = tape.param(store, self.pos);
        let tiled = tape.gather_rows(
            &[pos],
            (0..batch).flat_map(|_| (0..seq_len as u32).map(|r| (0, r))).collect(),
        )?;
        let tokens = tape.add(with_cls, tiled)?;
        Ok(TokenSequence {
            tokens,
            batch,
            seq_len,
            mask,
        })
    }

    /// One pre-norm transformer layer on stacked sequences of length
    /// `seq_len`. Masked rows are excluded as keys and pass through unchanged.
    pub fn layer_forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        l: usize,
        x: Var,
        seq_len: usize,
        mask: &[bool],
    ) -> Result<Var> {
        let lp = self
            .layers
            .get(l)
            .ok_or_else(|| Error::Input(format!("layer {l} out of range")))?;
        let (rows, d) = tape.dims(x);
        if d != self.config.d {
            return Err(Error::shape(
                "transformer_layer",
                format!("token dim {d}, layer dim {}", self.config.d),
            ));
        }
        if mask.len() != rows {
            return Err(Error::shape("transformer_layer", "mask length must equal row count"));
        }
        let row_factors: Option<Vec<f64>> = if mask.iter().all(|&m| m) {
            None
        } else {
            Some(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
        };
        let eps = self.config.layer_norm_eps;
        let mut p = |id| tape.param(store, id);
        let (g1, b1, wq, bq, wk, bk, wv, bv, wo, bo) = (
            p(lp.ln1_gain),
            p(lp.ln1_bias),
            p(lp.wq),
            p(lp.bq),
            p(lp.wk),
            p(lp.bk),
            p(lp.wv),
            p(lp.bv),
            p(lp.wo),
            p(lp.bo),
        );
        let (g2, b2, wu, bu, wd, bd) = (
            p(lp.ln2_gain),
            p(lp.ln2_bias),
            p(lp.w_up),
            p(lp.b_up),
            p(lp.w_down),
            p(lp.b_down),
        );

        let h = tape.layer_norm(x, g1, b1, eps)?;
        let q = tape.linear(h, wq, bq)?;
        let k = tape.linear(h, wk, bk)?;
        let v = tape.linear(h, wv, bv)?;
        let a = tape.attention(q, k, v, seq_len, self.config.heads, mask)?;
        let mut o = tape.linear(a, wo, bo)?;
        if let Some(f) = &row_factors {
            o = tape.scale_rows(o, f.clone())?;
        }
        let x1 = tape.add(x, o)?;

        let h2 = tape.layer_norm(x1, g2, b2, eps)?;
        let u = tape.linear(h2, wu, bu)?;
        let u = tape.gelu(u);
        let mut m = tape.linear(u, wd, bd)?;
        if let Some(f) = row_factors {
            m = tape.scale_rows(m, f)?;
        }
        tape.add(x1, m)
    }

    pub fn transformer_layer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        l: usize,
        seq: &TokenSequence,
    ) -> Result<TokenSequence> {
        let out = self.layer_forward(tape, store, l, seq.tokens, seq.seq_len, &seq.mask)?;
        Ok(seq.with_tokens(out))
    }

    /// Applies layers `0..lf` and returns the input of layer `lf`. Runs
    /// untracked when every parameter of the tower is frozen.
    pub fn encode_base(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &TokenSequence,
        lf: usize,
    ) -> Result<TokenSequence> {
        if lf > self.config.layers {
            return Err(Error::Config(format!(
                "fusion layer {lf} exceeds layer count {}",
                self.config.layers
            )));
        }
        let run = |tape: &mut Tape| {
            let mut s = seq.clone();
            for l in 0..lf {
                s = self.transformer_layer(tape, store, l, &s)?;
            }
            Ok(s)
        };
        if self.is_frozen(store) {
            tape.no_grad(run)
        } else {
            run(tape)
        }
    }

    /// Applies layers `from..to` with recording left as is.
    pub fn encode_range(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &TokenSequence,
        from: usize,
        to: usize,
    ) -> Result<TokenSequence> {
        let mut s = seq.clone();
        for l in from..to {
            s = self.transformer_layer(tape, store, l, &s)?;
        }
        Ok(s)
    }
}

enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Flattens each `patch x patch` block (row-major over `dy, dx, channel`),
/// patches in raster order.
pub fn patchify(
    images: &[&[f32]],
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> Result<Vec<f64>> {
    if !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::Input(format!(
            "image {height}x{width} is not divisible by patch size {patch}"
        )));
    }
    let mut out = Vec::with_capacity(images.len() * height * width * channels);
    for img in images {
        if img.len() != height * width * channels {
            return Err(Error::Input(format!(
                "image has {} values, expected {height}x{width}x{channels}",
                img.len()
            )));
        }
        for py in 0..height / patch {
            for px in 0..width / patch {
                for dy in 0..patch {
                    let row = (py * patch + dy) * width + px * patch;
                    let start = row * channels;
                    out.extend(img[start..start + patch * channels].iter().map(|&v| v as f64));
                }
            }
        }
    }
    Ok(out)
}
