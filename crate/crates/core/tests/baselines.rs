mod common;

use pmf::autograd::{DType, Tape};
use pmf::baselines::{match_pmf_heads, trainable_set, BaselineKind, BaselineModel, BASELINE_PROMPT_LEN};
use pmf::datagen::{Label, MultimodalRecord, TaskKind};
use pmf::fusion::{FusionConfig, PmfModel};
use proptest::prelude::*;

fn model(kind: BaselineKind, seed: u64) -> BaselineModel {
    let (img, txt) = common::toy_towers();
    BaselineModel::new(kind, &img, &txt, 2, DType::F32, seed).unwrap()
}

/// Runs one cross-entropy backward pass and copies grads into the store.
fn backward(m: &mut BaselineModel, recs: &[MultimodalRecord]) {
    let batch: Vec<_> = recs.iter().collect();
    let mut t = Tape::new(m.dtype);
    let logits = m.forward(&mut t, &batch).unwrap();
    let labels: Vec<usize> = recs.iter().map(|r| r.label.single().unwrap()).collect();
    let loss = t.cross_entropy(logits, &labels, &[1.0, 1.0]).unwrap();
    t.backward(loss).unwrap().apply_to(&mut m.store).unwrap();
}

#[test]
fn linear_with_zero_head_gives_zero_logits() {
    let mut m = model(BaselineKind::Linear, 0);
    for id in [m.head.w, m.head.b] {
        let n = m.store.get(id).numel();
        m.store.get_mut(id).set_data(vec![0.0; n]).unwrap();
    }
    let recs = common::records(TaskKind::Xor2, 3, 0);
    let batch: Vec<_> = recs.iter().collect();
    let mut t = Tape::new(DType::F32);
    let logits = m.forward(&mut t, &batch).unwrap();
    assert_eq!(t.dims(logits), (3, 2));
    assert!(t.value(logits).iter().all(|&v| v == 0.0));
}

#[test]
fn late_concat_trains_everything() {
    let mut m = model(BaselineKind::LateConcat, 1);
    backward(&mut m, &common::records(TaskKind::Xor2, 4, 1));
    for (_, name, t) in m.store.iter() {
        assert!(t.grad().is_some(), "{name} has no grad");
    }
}

#[test]
fn image_prompting_touches_only_its_prompts_and_head() {
    let mut m = model(BaselineKind::PromptImgOnly, 2);
    assert_eq!(m.prompts.len(), 4);
    backward(&mut m, &common::records(TaskKind::Xor2, 4, 2));
    for (id, name, t) in m.store.iter() {
        let expect = m.prompts.contains(&id) || id == m.head.w || id == m.head.b;
        assert_eq!(t.grad().is_some(), expect, "{name}");
    }
    assert!(m.img.is_frozen(&m.store) && m.txt.is_frozen(&m.store));
}

#[test]
fn trainable_sets_per_kind() {
    assert_eq!(trainable_set(&model(BaselineKind::Linear, 0)), vec!["head.W", "head.b"]);
    let late = model(BaselineKind::LateConcat, 0);
    let all: Vec<String> = late.store.iter().map(|(_, n, _)| n.to_string()).collect();
    assert_eq!(trainable_set(&late), all);
    let txt = model(BaselineKind::PromptTxtOnly, 0);
    let names = trainable_set(&txt);
    assert_eq!(names.len(), 4 + 2);
    let count: usize = names.iter().map(|n| txt.store.by_name(n).unwrap().numel()).sum();
    assert_eq!(count, 4 * BASELINE_PROMPT_LEN * 12 + (12 + 1) * 2);
    assert_eq!(trainable_set(&txt), trainable_set(&model(BaselineKind::PromptTxtOnly, 0)));
}

#[test]
fn malformed_modality_input_is_an_error() {
    let mut recs = common::records(TaskKind::Xor2, 1, 3);
    recs[0].image.clear();
    let batch: Vec<_> = recs.iter().collect();
    for kind in [BaselineKind::Linear, BaselineKind::PromptImgOnly] {
        let m = model(kind, 3);
        let mut t = Tape::new(DType::F32);
        assert!(m.forward(&mut t, &batch).is_err(), "{}", kind.name());
    }
}

#[test]
fn classifier_preparation_matches_direct_forward() {
    use pmf::training::Classifier;
    let recs = common::records(TaskKind::Xor2, 5, 4);
    let batch: Vec<_> = recs.iter().collect();
    for kind in BaselineKind::ALL {
        let m = model(kind, 4);
        let prepared = m.prepare(&recs).unwrap();
        let refs: Vec<_> = prepared.iter().collect();
        let mut a = Tape::new(DType::F32);
        let la = m.forward(&mut a, &batch).unwrap();
        let mut b = Tape::new(DType::F32);
        let lb = m.forward_prepared(&mut b, &refs).unwrap();
        assert_eq!(a.value(la), b.value(lb), "{}", kind.name());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn linear_equals_pmf_without_fusion_layers(seed in 0u64..100_000) {
        let (img, txt) = common::toy_towers();
        let linear = BaselineModel::new(BaselineKind::Linear, &img, &txt, 2, DType::F64, seed).unwrap();
        let cfg = FusionConfig::deep_two(&img, &txt, 2, 2).with_lf(&img, &txt, 0);
        let mut pmf = PmfModel::new(&img, &txt, &cfg, DType::F64, seed).unwrap();
        prop_assert_eq!(pmf.fusion_layer_count(), 0);
        prop_assert_eq!(pmf.store.trainable_count(), linear.store.trainable_count() + 2);
        match_pmf_heads(&linear, &mut pmf).unwrap();
        let recs = common::records(TaskKind::Xor2, 4, seed);
        let batch: Vec<_> = recs.iter().collect();
        let (mut ta, mut tb) = (Tape::new(DType::F64), Tape::new(DType::F64));
        let a = linear.forward(&mut ta, &batch).unwrap();
        let b = pmf.forward(&mut tb, &batch).unwrap();
        prop_assert!(common::max_abs_diff(ta.value(a), tb.value(b)) < 1e-6);
        prop_assert!(recs.iter().all(|r| matches!(r.label, Label::Single(_))));
    }
}
