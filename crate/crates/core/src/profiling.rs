//! Training-memory sweeps over the fusion start layer and the prompt length.
//!
//! Each point builds a fresh model, runs one forward and backward pass on a
//! fixed batch and reports the tape statistics of that pass next to the
//! closed-form trainable-parameter count.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{DType, Tape};
use crate::datagen::{Label, MultimodalRecord};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::{count_trainable_params, FusionConfig, PmfModel, TowerShape};
use crate::training::loss::batch_loss;
use crate::training::LossChoice;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    /// Fusion start layer of the vision tower; the text tower fuses the
    /// same number of layers.
    #[serde(rename = "Lf", alias = "lf")]
    Lf,
    /// Length of every prompt kind.
    #[serde(rename = "M", alias = "m")]
    M,
}

impl SweepAxis {
    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::Lf => "Lf",
            SweepAxis::M => "M",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub trainable_params: usize,
    pub tape_nodes: usize,
    pub tape_saved_bytes: usize,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

/// Fixed parts of a sweep.
#[derive(Debug, Clone)]
pub struct ProfileSetup {
    pub img: EncoderConfig,
    pub txt: EncoderConfig,
    pub fusion: FusionConfig,
    pub dtype: DType,
    pub seed: u64,
}

impl ProfileSetup {
    /// The fusion config at one sweep point.
    pub fn point(&self, axis: SweepAxis, value: usize) -> Result<FusionConfig> {
        let fusion = match axis {
            SweepAxis::Lf => {
                if value > self.img.layers {
                    return Err(Error::Config(format!(
                        "sweep point Lf={value} exceeds {} layers",
                        self.img.layers
                    )));
                }
                let fused = self.img.layers - value;
                if fused > self.txt.layers {
                    return Err(Error::Config(format!(
                        "sweep point Lf={value} fuses {fused} layers but the text tower has {}",
                        self.txt.layers
                    )));
                }
                self.fusion.clone().with_lf(&self.img, &self.txt, fused)
            }
            SweepAxis::M => {
                if value == 0 {
                    return Err(Error::Config("sweep point M=0: prompts need length >= 1".into()));
                }
                self.fusion.clone().with_prompt_len(value)
            }
        };
        fusion
            .validate(&self.img, &self.txt)
            .map_err(|e| Error::Config(format!("sweep point {}={value}: {e}", axis.label())))?;
        Ok(fusion)
    }
}

/// Tape statistics of one training step, one row per value, sorted by value.
pub fn profile_sweep(
    axis: SweepAxis,
    values: &[usize],
    setup: &ProfileSetup,
    batch: &[MultimodalRecord],
) -> Result<SweepResult> {
    if batch.is_empty() {
        return Err(Error::Input("profiling needs a non-empty batch".into()));
    }
    let mut values = values.to_vec();
    values.sort_unstable();
    values.dedup();
    let refs: Vec<&MultimodalRecord> = batch.iter().collect();
    let labels: Vec<&Label> = batch.iter().map(|r| &r.label).collect();
    let loss_choice = match batch[0].label {
        Label::Single(_) => LossChoice::WeightedCe,
        Label::Multi(_) => LossChoice::BceMultilabel,
    };
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let fusion = setup.point(axis, value)?;
        let model = PmfModel::new(&setup.img, &setup.txt, &fusion, setup.dtype, setup.seed)?;
        let mut tape = Tape::new(setup.dtype);
        let logits = model.forward(&mut tape, &refs)?;
        let weights = vec![1.0; fusion.n_classes];
        let loss = batch_loss(&mut tape, loss_choice, logits, &labels, &weights)?;
        let stats = tape.stats();
        tape.backward(loss)?;
        let params = count_trainable_params(
            TowerShape {
                layers: setup.img.layers,
                d: setup.img.d,
            },
            TowerShape {
                layers: setup.txt.layers,
                d: setup.txt.d,
            },
            &fusion,
        );
        rows.push(SweepRow {
            value,
            trainable_params: params.total,
            tape_nodes: stats.node_count,
            tape_saved_bytes: stats.saved_bytes,
            val_metric: None,
        });
    }
    Ok(SweepResult { axis, rows })
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,value,params,tape_nodes,saved_bytes,metric\n");
        for r in &self.rows {
            let metric = r.val_metric.map(|m| m.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                self.axis.label(),
                r.value,
                r.trainable_params,
                r.tape_nodes,
                r.tape_saved_bytes,
                metric
            );
        }
        out
    }

    pub fn write(&self, csv: &Path, json: &Path) -> Result<()> {
        std::fs::write(csv, self.to_csv())?;
        std::fs::write(json, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
