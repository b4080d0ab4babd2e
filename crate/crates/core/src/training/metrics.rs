use serde::{Deserialize, Serialize};

use crate::datagen::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Exact-match rate.
    pub accuracy: f64,
    pub f1_macro: f64,
    pub f1_micro: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Counts {
    /// `2TP / (2TP + FP + FN)`, zero when the class never occurs.
    fn f1(self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Accuracy plus per-class F1 averaged two ways. Classes with no support
/// and no predictions score F1 = 0 in the macro mean.
pub fn compute_metrics(predictions: &[Label], truth: &[Label], n_classes: usize) -> Result<Metrics> {
    if predictions.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    if predictions.len() != truth.len() {
        return Err(Error::Input("prediction and label counts differ".into()));
    }
    let mut per_class = vec![Counts::default(); n_classes];
    let mut exact = 0;
    for (p, t) in predictions.iter().zip(truth) {
        exact += (p == t) as usize;
        let (pv, tv) = (as_indicator(p, n_classes)?, as_indicator(t, n_classes)?);
        for c in 0..n_classes {
            match (pv[c], tv[c]) {
                (true, true) => per_class[c].tp += 1,
                (true, false) => per_class[c].fp += 1,
                (false, true) => per_class[c].fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let f1_macro = per_class.iter().map(|c| c.f1()).sum::<f64>() / n_classes as f64;
    let pooled = per_class.iter().fold(Counts::default(), |acc, c| Counts {
        tp: acc.tp + c.tp,
        fp: acc.fp + c.fp,
        fn_: acc.fn_ + c.fn_,
    });
    Ok(Metrics {
        accuracy: exact as f64 / predictions.len() as f64,
        f1_macro,
        f1_micro: pooled.f1(),
    })
}

fn as_indicator(label: &Label, n_classes: usize) -> Result<Vec<bool>> {
    match label {
        Label::Single(c) if *c < n_classes => {
            let mut v = vec![false; n_classes];
            v[*c] = true;
            Ok(v)
        }
        Label::Single(c) => Err(Error::Input(format!("label {c} >= {n_classes} classes"))),
        Label::Multi(v) if v.len() == n_classes => Ok(v.clone()),
        Label::Multi(v) => Err(Error::Input(format!(
            "multi-label of length {} for {n_classes} labels",
            v.len()
        ))),
    }
}

/// Argmax for single-label logits, `sigmoid(x) > 0.5` per label otherwise.
pub fn predict(logits: &[f64], n_out: usize, multi_label: bool) -> Vec<Label> {
    logits
        .chunks(n_out)
        .map(|row| {
            if multi_label {
                Label::Multi(row.iter().map(|&x| x > 0.0).collect())
            } else {
                let mut best = 0;
                for (i, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = i;
                    }
                }
                Label::Single(best)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[usize]) -> Vec<Label> {
        v.iter().map(|&c| Label::Single(c)).collect()
    }

    #[test]
    fn perfect_predictions() {
        let m = compute_metrics(&s(&[0, 1, 2, 1]), &s(&[0, 1, 2, 1]), 3).unwrap();
        assert_eq!((m.accuracy, m.f1_macro, m.f1_micro), (1.0, 1.0, 1.0));
    }

    #[test]
    fn one_of_each_confusion_cell() {
        // truth/pred pairs: TP (1,1), FP (0->1), FN (1->0), TN (0,0)
        let m = compute_metrics(&s(&[1, 1, 0, 0]), &s(&[1, 0, 1, 0]), 2).unwrap();
        assert!((m.f1_macro - 0.5).abs() < 1e-15);
        assert!((m.f1_micro - 0.5).abs() < 1e-15);
        assert!((m.accuracy - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let m = compute_metrics(&s(&[0, 0, 0, 0]), &s(&[0, 1, 0, 1]), 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert!((m.f1_macro - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_support_class_counts_as_zero() {
        let m = compute_metrics(&s(&[0, 1]), &s(&[0, 1]), 3).unwrap();
        assert!((m.f1_macro - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(compute_metrics(&[], &[], 2).is_err());
    }

    #[test]
    fn multi_label_thresholds_at_zero_logit() {
        let p = predict(&[0.1, -0.1, -3.0, 2.0], 2, true);
        assert_eq!(p, vec![Label::Multi(vec![true, false]), Label::Multi(vec![false, true])]);
        let m = compute_metrics(&p, &[Label::Multi(vec![true, true]), Label::Multi(vec![false, true])], 2)
            .unwrap();
        assert_eq!(m.accuracy, 0.5);
        // pooled: tp 2, fn 1 -> 4/5
        assert!((m.f1_micro - 0.8).abs() < 1e-15);
    }
}
