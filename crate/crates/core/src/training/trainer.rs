use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{DType, ParamStore, Sgd, SgdConfig, Tape, TapeStats, Var};
use crate::datagen::{self, Label, MultimodalRecord};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::training::loss::{batch_loss, LossChoice};
use crate::training::metrics::{compute_metrics, predict, Metrics};

/// Anything trainable by [`train_run`]. `Prepared` is the per-record input
/// the model actually consumes, so frozen prefixes can be computed once.
pub trait Classifier {
    type Prepared;

    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn dtype(&self) -> DType;
    fn n_outputs(&self) -> usize;
    fn prepare(&self, records: &[MultimodalRecord]) -> Result<Vec<Self::Prepared>>;
    fn forward_prepared(&self, tape: &mut Tape, batch: &[&Self::Prepared]) -> Result<Var>;

    fn forward_records(&self, tape: &mut Tape, records: &[MultimodalRecord]) -> Result<Var> {
        let prepared = self.prepare(records)?;
        let refs: Vec<&Self::Prepared> = prepared.iter().collect();
        self.forward_prepared(tape, &refs)
    }
}

fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    20
}
fn default_eval_every() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossChoice,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Inverse-frequency class weights; off gives every class weight 1.
    #[serde(default = "default_true")]
    pub class_weighting: bool,
}

impl TrainConfig {
    pub fn new(lr: f64) -> Self {
        TrainConfig {
            lr,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seed: 0,
            loss: LossChoice::WeightedCe,
            eval_every: default_eval_every(),
            class_weighting: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        self.sgd().validate()
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
    pub val_f1_macro: Option<f64>,
    pub val_f1_micro: Option<f64>,
    /// Statistics of the first full training batch of the epoch.
    pub tape_nodes: usize,
    pub tape_saved_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<Metrics>,
    pub steps: usize,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

fn multi_label(records: &[MultimodalRecord]) -> bool {
    matches!(records.first().map(|r| &r.label), Some(Label::Multi(_)))
}

/// Class (or per-label) weights for the training labels.
pub fn loss_weights(records: &[MultimodalRecord], n_out: usize, weighted: bool) -> Result<Vec<f64>> {
    if !weighted {
        return Ok(vec![1.0; n_out]);
    }
    let err = |e: Error| match e {
        Error::EmptyClass { class } => Error::Config(format!(
            "class {class} has no training samples; set train.class_weighting to false"
        )),
        e => e,
    };
    if multi_label(records) {
        let labels: Vec<Vec<bool>> = records
            .iter()
            .map(|r| match &r.label {
                Label::Multi(v) => Ok(v.clone()),
                Label::Single(_) => Err(Error::Input("mixed label kinds".into())),
            })
            .collect::<Result<_>>()?;
        datagen::compute_multilabel_weights(&labels, n_out).map_err(err)
    } else {
        let labels: Vec<usize> = records
            .iter()
            .map(|r| r.label.single().ok_or_else(|| Error::Input("mixed label kinds".into())))
            .collect::<Result<_>>()?;
        datagen::compute_class_weights(&labels, n_out).map_err(err)
    }
}

/// Trains every parameter with `requires_grad` set. The trainable values of
/// the epoch with the best validation accuracy are restored at the end. When
/// `log` is given, one JSON object per epoch is written to it.
pub fn train_run<C: Classifier>(
    model: &mut C,
    train: &[MultimodalRecord],
    val: &[MultimodalRecord],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if model.store().trainable_count() == 0 {
        return Err(Error::Config("model has no trainable parameters".into()));
    }
    let n_out = model.n_outputs();
    let weights = loss_weights(train, n_out, cfg.class_weighting)?;
    let train_p = model.prepare(train)?;
    let val_p = if val.is_empty() { Vec::new() } else { model.prepare(val)? };

    let mut sgd = Sgd::new(cfg.sgd())?;
    let mut shuffle = rng::substream(cfg.seed, stream::SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Metrics, Vec<Vec<f64>>)> = None;
    let mut steps = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut stats = TapeStats::default();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&C::Prepared> = chunk.iter().map(|&i| &train_p[i]).collect();
            let labels: Vec<&Label> = chunk.iter().map(|&i| &train[i].label).collect();
            let mut tape = Tape::new(model.dtype());
            let logits = model.forward_prepared(&mut tape, &batch)?;
            let loss = batch_loss(&mut tape, cfg.loss, logits, &labels, &weights)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss is {value} at epoch {epoch}, batch {bi}; try a smaller lr"
                )));
            }
            if bi == 0 {
                stats = tape.stats();
            }
            let grads = tape.backward(loss)?;
            let store = model.store_mut();
            store.zero_grad();
            grads.apply_to(store)?;
            sgd.step(store)?;
            loss_sum += value * chunk.len() as f64;
            steps += 1;
        }
        let train_loss = loss_sum / train.len() as f64;

        let mut record = EpochMetrics {
            epoch,
            train_loss,
            val_acc: None,
            val_f1_macro: None,
            val_f1_micro: None,
            tape_nodes: stats.node_count,
            tape_saved_bytes: stats.saved_bytes,
        };
        if !val.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            let m = evaluate_prepared(model, &val_p, val, cfg.batch_size)?;
            record.val_acc = Some(m.accuracy);
            record.val_f1_macro = Some(m.f1_macro);
            record.val_f1_micro = Some(m.f1_micro);
            if best.as_ref().is_none_or(|b| m.accuracy > b.0) {
                best = Some((m.accuracy, epoch, m, trainable_values(model.store())));
            }
        }
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.5} val_acc {}",
            record.val_acc.map_or("-".into(), |a| format!("{a:.4}"))
        );
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        epochs.push(record);
    }

    let (best_epoch, best_val) = match best {
        Some((_, epoch, m, values)) => {
            restore_trainable(model.store_mut(), values)?;
            (Some(epoch), Some(m))
        }
        None => (None, None),
    };
    model.store_mut().zero_grad();
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val,
        steps,
    })
}

fn trainable_values(store: &ParamStore) -> Vec<Vec<f64>> {
    store
        .iter()
        .filter(|(_, _, t)| t.requires_grad())
        .map(|(_, _, t)| t.data().to_vec())
        .collect()
}

fn restore_trainable(store: &mut ParamStore, values: Vec<Vec<f64>>) -> Result<()> {
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).requires_grad()).collect();
    for (id, v) in ids.into_iter().zip(values) {
        store.get_mut(id).set_data(v)?;
    }
    Ok(())
}

/// Logits for every record, computed untracked in batches.
pub fn predict_logits<C: Classifier>(
    model: &C,
    prepared: &[C::Prepared],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(prepared.len() * model.n_outputs());
    for chunk in prepared.chunks(batch_size.max(1)) {
        let refs: Vec<&C::Prepared> = chunk.iter().collect();
        let mut tape = Tape::new(model.dtype());
        let logits = tape.no_grad(|t| model.forward_prepared(t, &refs))?;
        out.extend_from_slice(tape.value(logits));
    }
    Ok(out)
}

fn evaluate_prepared<C: Classifier>(
    model: &C,
    prepared: &[C::Prepared],
    records: &[MultimodalRecord],
    batch_size: usize,
) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let logits = predict_logits(model, prepared, batch_size)?;
    let preds = predict(&logits, model.n_outputs(), multi_label(records));
    let truth: Vec<Label> = records.iter().map(|r| r.label.clone()).collect();
    compute_metrics(&preds, &truth, model.n_outputs())
}

/// Accuracy and F1 scores of `model` on `records`.
pub fn evaluate<C: Classifier>(
    model: &C,
    records: &[MultimodalRecord],
    batch_size: usize,
) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let prepared = model.prepare(records)?;
    evaluate_prepared(model, &prepared, records, batch_size)
}
