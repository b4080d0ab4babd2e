use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::datagen::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossChoice {
    #[default]
    WeightedCe,
    BceMultilabel,
}

/// Batch mean of `-w[y] log softmax(logits)[y]`.
pub fn weighted_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<Var> {
    tape.cross_entropy(logits, labels, class_weights)
}

/// Mean over labels (and batch) of per-label weighted binary cross-entropy,
/// computed in the stable `softplus` form.
pub fn bce_multilabel(
    tape: &mut Tape,
    logits: Var,
    labels: &[Vec<bool>],
    class_weights: &[f64],
) -> Result<Var> {
    let targets: Vec<f64> = labels
        .iter()
        .flat_map(|l| l.iter().map(|&b| if b { 1.0 } else { 0.0 }))
        .collect();
    tape.bce_with_logits(logits, &targets, class_weights)
}

/// Applies the configured loss to a batch of labels.
pub fn batch_loss(
    tape: &mut Tape,
    choice: LossChoice,
    logits: Var,
    labels: &[&Label],
    class_weights: &[f64],
) -> Result<Var> {
    match choice {
        LossChoice::WeightedCe => {
            let ys = labels
                .iter()
                .map(|l| l.single().ok_or_else(|| Error::Input("weighted_ce needs single labels".into())))
                .collect::<Result<Vec<_>>>()?;
            weighted_cross_entropy(tape, logits, &ys, class_weights)
        }
        LossChoice::BceMultilabel => {
            let ys = labels
                .iter()
                .map(|l| match l {
                    Label::Multi(v) => Ok(v.clone()),
                    Label::Single(_) => Err(Error::Input("bce_multilabel needs multi-labels".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            bce_multilabel(tape, logits, &ys, class_weights)
        }
    }
}
