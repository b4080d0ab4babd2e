//! Unimodal pretraining, which manufactures the frozen towers PMF starts from.

use crate::autograd::{DType, ParamStore, Tape, Var};
use crate::datagen::MultimodalRecord;
use crate::encoder::{Encoder, EncoderConfig, InputConfig};
use crate::error::{Error, Result};
use crate::fusion::Head;
use crate::rng::{self, stream};
use crate::training::trainer::{evaluate, train_run, Classifier, TrainConfig};

/// Accuracy below which a pretraining run counts as failed.
pub const MIN_PRETRAIN_ACCURACY: f64 = 0.9;

const HEAD_PREFIX: &str = "pretrain_head.";

/// One tower with a temporary linear head on its CLS output.
#[derive(Debug, Clone)]
pub struct UnimodalModel {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: Head,
    pub dtype: DType,
}

impl UnimodalModel {
    pub fn new(
        config: &EncoderConfig,
        prefix: &str,
        n_classes: usize,
        dtype: DType,
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let init_stream = match config.input {
            InputConfig::Vision { .. } => stream::INIT_IMG,
            InputConfig::Text { .. } => stream::INIT_TXT,
        };
        let encoder =
            Encoder::init(config, &mut store, prefix, dtype, &mut rng::substream(seed, init_stream))?;
        let head = Head::init(
            &mut store,
            HEAD_PREFIX,
            config.d,
            n_classes,
            dtype,
            &mut rng::substream(seed, stream::INIT_HEAD),
        );
        Ok(UnimodalModel {
            store,
            encoder,
            head,
            dtype,
        })
    }

    /// The encoder's parameters alone, frozen.
    pub fn frozen_encoder(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for id in self.encoder.param_ids() {
            let t = self.store.get(id).clone().with_requires_grad(false);
            out.insert(self.store.name(id), t);
        }
        out
    }
}

impl Classifier for UnimodalModel {
    type Prepared = MultimodalRecord;

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

    fn prepare(&self, records: &[MultimodalRecord]) -> Result<Vec<MultimodalRecord>> {
        Ok(records.to_vec())
    }

    fn forward_prepared(&self, tape: &mut Tape, batch: &[&MultimodalRecord]) -> Result<Var> {
        let seq = match self.encoder.config.input {
            InputConfig::Vision { .. } => {
                let images: Vec<&[f32]> = batch.iter().map(|r| r.image.as_slice()).collect();
                self.encoder.embed_image(tape, &self.store, &images)?
            }
            InputConfig::Text { .. } => {
                let texts: Vec<&[u32]> = batch.iter().map(|r| r.tokens.as_slice()).collect();
                self.encoder.embed_text(tape, &self.store, &texts)?
            }
        };
        let layers = self.encoder.config.layers;
        let out = self.encoder.encode_range(tape, &self.store, &seq, 0, layers)?;
        let cls = tape.gather_rows(&[out.tokens], out.cls_rows())?;
        self.head.forward(tape, &self.store, cls)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Frozen encoder parameters, named under the requested prefix.
    pub encoder: ParamStore,
    pub val_accuracy: f64,
    /// Seed of the run that produced `encoder`.
    pub seed: u64,
    pub attempts: usize,
}

/// Trains a tower end to end on a single-label task read from its own
/// modality, then drops the head and freezes the tower. A run whose
/// validation accuracy ends below [`MIN_PRETRAIN_ACCURACY`] is retried with
/// the next seed, up to `max_attempts` runs; the best run is returned.
pub fn pretrain_unimodal(
    config: &EncoderConfig,
    prefix: &str,
    train: &[MultimodalRecord],
    val: &[MultimodalRecord],
    cfg: &TrainConfig,
    dtype: DType,
    max_attempts: usize,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if max_attempts == 0 {
        return Err(Error::Config("max_attempts must be >= 1".into()));
    }
    let n_classes = train
        .iter()
        .map(|r| r.label.single().map(|c| c + 1))
        .collect::<Option<Vec<_>>>()
        .and_then(|v| v.into_iter().max())
        .ok_or_else(|| Error::Input("pretraining needs single-label records".into()))?
        .max(2);
    let mut best: Option<PretrainOutcome> = None;
    for attempt in 0..max_attempts {
        let seed = cfg.seed + attempt as u64;
        let mut model = UnimodalModel::new(config, prefix, n_classes, dtype, seed)?;
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        train_run(&mut model, train, val, &run_cfg, None)?;
        let acc = evaluate(&model, if val.is_empty() { train } else { val }, cfg.batch_size)?.accuracy;
        let outcome = PretrainOutcome {
            encoder: model.frozen_encoder(),
            val_accuracy: acc,
            seed,
            attempts: attempt + 1,
        };
        if acc >= MIN_PRETRAIN_ACCURACY {
            return Ok(outcome);
        }
        log::warn!(
            "pretraining {prefix} with seed {seed} reached accuracy {acc:.4} < {MIN_PRETRAIN_ACCURACY}; retrying with seed {}",
            seed + 1
        );
        if best.as_ref().is_none_or(|b| acc > b.val_accuracy) {
            best = Some(PretrainOutcome { attempts: attempt + 1, ..outcome });
        }
    }
    let mut best = best.expect("at least one attempt");
    best.attempts = max_attempts;
    log::warn!(
        "pretraining {prefix} stayed below {MIN_PRETRAIN_ACCURACY} after {max_attempts} attempts; using seed {}",
        best.seed
    );
    Ok(best)
}
