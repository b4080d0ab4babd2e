mod common;

use pmf::autograd::{DType, ParamStore, Sgd, Tape, Tensor};
use pmf::datagen::{generate_split, single_bit_task, Label, MultimodalRecord, TaskKind, TaskSpec};
use pmf::encoder::EncoderConfig;
use pmf::fusion::{FusionConfig, PmfModel};
use pmf::rng::stream;
use pmf::training::checkpoint::{decode_checkpoint, encode_checkpoint, Manifest};
use pmf::training::loss::batch_loss;
use pmf::training::{
    compute_metrics, evaluate, load_checkpoint, pretrain_unimodal, save_checkpoint, train_run,
    Classifier, TrainConfig,
};
use pmf::Error;
use proptest::prelude::*;

fn snapshot(store: &ParamStore) -> Vec<Vec<u64>> {
    store
        .iter()
        .map(|(_, _, t)| t.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

fn backbone_bits(model: &PmfModel) -> Vec<Vec<u64>> {
    model
        .backbone_ids()
        .iter()
        .map(|&id| model.store.get(id).data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

fn loss_on(model: &PmfModel, recs: &[MultimodalRecord]) -> f64 {
    let batch: Vec<_> = recs.iter().collect();
    let mut t = Tape::new(model.dtype);
    let logits = model.forward(&mut t, &batch).unwrap();
    let labels: Vec<&Label> = recs.iter().map(|r| &r.label).collect();
    let loss = batch_loss(&mut t, Default::default(), logits, &labels, &[1.0, 1.0]).unwrap();
    t.value(loss)[0]
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut model = common::toy_pmf(DType::F32, 0);
    let recs = common::records(TaskKind::Xor2, 24, 0);
    let before = snapshot(&model.store);
    // The run config rejects lr = 0, so drive the optimizer directly.
    let mut cfg = TrainConfig::new(0.1);
    cfg.lr = 0.0;
    assert!(matches!(train_run(&mut model, &recs, &[], &cfg, None), Err(Error::Config(_))));
    let mut sgd = Sgd::new(cfg.sgd()).unwrap();
    let prepared = model.prepare(&recs).unwrap();
    for chunk in prepared.chunks(8).zip(recs.chunks(8)) {
        let feats: Vec<_> = chunk.0.iter().collect();
        let labels: Vec<&Label> = chunk.1.iter().map(|r| &r.label).collect();
        let mut t = Tape::new(model.dtype);
        let logits = model.forward_prepared(&mut t, &feats).unwrap();
        let loss = batch_loss(&mut t, cfg.loss, logits, &labels, &[1.0, 1.0]).unwrap();
        let g = t.backward(loss).unwrap();
        model.store.zero_grad();
        g.apply_to(&mut model.store).unwrap();
        sgd.step(&mut model.store).unwrap();
    }
    assert_eq!(snapshot(&model.store), before);
}

#[test]
fn full_run_leaves_backbones_bitwise_unchanged() {
    let mut model = common::toy_pmf(DType::F32, 1);
    let before = backbone_bits(&model);
    let train = common::records(TaskKind::Xor2, 64, 1);
    let val = generate_split(&TaskSpec::new(TaskKind::Xor2), 32, 1, stream::DATA_VAL).unwrap();
    let mut cfg = TrainConfig::new(0.05);
    cfg.epochs = 3;
    cfg.batch_size = 16;
    let report = train_run(&mut model, &train, &val, &cfg, None).unwrap();
    assert_eq!(report.epochs.len(), 3);
    assert_eq!(report.steps, 12);
    assert_eq!(backbone_bits(&model), before);
    assert!(model.backbone_ids().iter().all(|&id| !model.store.get(id).requires_grad()));
}

#[test]
fn memorizes_fifty_samples() {
    let mut model = common::toy_pmf(DType::F32, 2);
    let recs = common::records(TaskKind::Xor2, 50, 2);
    let initial = loss_on(&model, &recs);
    let mut cfg = TrainConfig::new(0.05);
    cfg.batch_size = 50;
    cfg.epochs = 200;
    cfg.class_weighting = false;
    let report = train_run(&mut model, &recs, &[], &cfg, None).unwrap();
    assert_eq!(report.steps, 200);
    let last = loss_on(&model, &recs);
    assert!(last < 0.1 * initial, "initial {initial}, after 200 steps {last}");
}

#[test]
fn metrics_log_is_deterministic() {
    let run = || {
        let mut model = common::toy_pmf(DType::F32, 3);
        let train = common::records(TaskKind::Joint4, 40, 3);
        let val = generate_split(&TaskSpec::new(TaskKind::Joint4), 20, 3, stream::DATA_VAL).unwrap();
        model = PmfModel::new(
            &model.img.config,
            &model.txt.config,
            &FusionConfig { n_classes: 4, ..model.fusion.clone() },
            DType::F32,
            3,
        )
        .unwrap();
        let mut cfg = TrainConfig::new(0.05);
        cfg.epochs = 2;
        cfg.batch_size = 8;
        let mut log = Vec::new();
        train_run(&mut model, &train, &val, &cfg, Some(&mut log)).unwrap();
        (log, snapshot(&model.store))
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 2);
    let line: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["epoch", "train_loss", "val_acc", "val_f1_macro", "val_f1_micro", "tape_nodes", "tape_saved_bytes"] {
        assert!(line.get(key).is_some(), "{key}");
    }
    assert!(line["tape_nodes"].as_u64().unwrap() > 0);
}

#[test]
fn multilabel_training_runs() {
    let (img, txt) = common::toy_towers();
    let mut fusion = common::toy_fusion(2);
    fusion.loss = pmf::fusion::LossKind::MultiLabel;
    let mut model = PmfModel::new(&img, &txt, &fusion, DType::F32, 4).unwrap();
    let train = common::records(TaskKind::Multilabel2, 32, 4);
    let val = generate_split(&TaskSpec::new(TaskKind::Multilabel2), 16, 4, stream::DATA_VAL).unwrap();
    let mut cfg = TrainConfig::new(0.05);
    cfg.loss = pmf::training::LossChoice::BceMultilabel;
    cfg.epochs = 1;
    let report = train_run(&mut model, &train, &val, &cfg, None).unwrap();
    let m = report.best_val.unwrap();
    assert!((0.0..=1.0).contains(&m.f1_macro));
}

#[test]
fn non_finite_loss_aborts() {
    let mut model = common::toy_pmf(DType::F32, 5);
    let w = model.head_img.w;
    let n = model.store.get(w).numel();
    model.store.get_mut(w).set_data(vec![f64::INFINITY; n]).unwrap();
    let train = common::records(TaskKind::Xor2, 8, 5);
    let err = train_run(&mut model, &train, &[], &TrainConfig::new(0.05), None).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

#[test]
fn missing_class_requires_disabling_weights() {
    let mut model = common::toy_pmf(DType::F32, 6);
    let train: Vec<_> = common::records(TaskKind::Xor2, 40, 6)
        .into_iter()
        .filter(|r| r.label == Label::Single(0))
        .collect();
    let mut cfg = TrainConfig::new(0.05);
    cfg.epochs = 1;
    let err = train_run(&mut model, &train, &[], &cfg, None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("class_weighting"), "{err}");
    cfg.class_weighting = false;
    train_run(&mut model, &train, &[], &cfg, None).unwrap();
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::new(0.1).validate().is_ok());
    let mut c = TrainConfig::new(0.1);
    c.batch_size = 0;
    assert!(c.validate().is_err());
    assert!(TrainConfig::new(-1.0).validate().is_err());
    assert!(TrainConfig::new(f64::NAN).validate().is_err());
    let c: TrainConfig = serde_json::from_str(r#"{"lr": 0.01}"#).unwrap();
    assert_eq!((c.momentum, c.weight_decay), (0.9, 1e-4));
    assert!(serde_json::from_str::<TrainConfig>("{}").unwrap_err().to_string().contains("lr"));
}

#[test]
fn checkpoint_round_trip_restores_the_model() {
    let model = common::toy_pmf(DType::F32, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let configs = serde_json::json!({"fusion": model.fusion});
    save_checkpoint(&path, &model.store, &configs).unwrap();
    let (store, cfg) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg, configs);
    assert_eq!(snapshot(&store), snapshot(&model.store));
    let back = PmfModel::from_store(&model.img.config, &model.txt.config, &model.fusion, store).unwrap();
    let recs = common::records(TaskKind::Xor2, 3, 7);
    let batch: Vec<_> = recs.iter().collect();
    let (mut ta, mut tb) = (Tape::new(DType::F32), Tape::new(DType::F32));
    let a = model.forward(&mut ta, &batch).unwrap();
    let b = back.forward(&mut tb, &batch).unwrap();
    assert_eq!(ta.value(a), tb.value(b));
    assert!(back.backbone_ids().iter().all(|&id| !back.store.get(id).requires_grad()));
}

fn manifest(bytes: &[u8]) -> Manifest {
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    serde_json::from_slice(&bytes[16..16 + len]).unwrap()
}

#[test]
fn pretrained_towers_reach_target_and_stay_frozen() {
    let spec = TaskSpec::new(TaskKind::Multilabel2);
    let train = generate_split(&spec, 2000, 0, stream::DATA_TRAIN).unwrap();
    let val = generate_split(&spec, 500, 0, stream::DATA_VAL).unwrap();
    let img_cfg = EncoderConfig::vision_default();
    let txt_cfg = EncoderConfig::text_default();
    let mut results = Vec::new();
    for (cfg, prefix, bit, lr) in [(&img_cfg, "img.", 0, 0.05), (&txt_cfg, "txt.", 1, 0.01)] {
        let mut tc = TrainConfig::new(lr);
        tc.epochs = 3;
        let out = pretrain_unimodal(
            cfg,
            prefix,
            &single_bit_task(&train, bit).unwrap(),
            &single_bit_task(&val, bit).unwrap(),
            &tc,
            DType::F32,
            2,
        )
        .unwrap();
        assert!(out.val_accuracy >= 0.95, "{prefix} tower: {}", out.val_accuracy);
        assert!(out.encoder.iter().all(|(_, name, t)| name.starts_with(prefix) && !t.requires_grad()));
        results.push(out);
    }

    let fusion = FusionConfig::deep_two(&img_cfg, &txt_cfg, 4, 2);
    let mut model = PmfModel::new(&img_cfg, &txt_cfg, &fusion, DType::F32, 0).unwrap();
    model
        .load_backbones((&results[0].encoder, "img."), (&results[1].encoder, "txt."))
        .unwrap();
    let loaded = backbone_bits(&model);
    let pretrained: Vec<Vec<u64>> = results
        .iter()
        .flat_map(|o| o.encoder.iter().map(|(_, _, t)| t.data().iter().map(|v| v.to_bits()).collect()))
        .collect();
    assert_eq!(loaded, pretrained);

    let xor = generate_split(&TaskSpec::new(TaskKind::Xor2), 800, 0, stream::DATA_TRAIN).unwrap();
    let mut tc = TrainConfig::new(0.05);
    tc.epochs = 1;
    tc.batch_size = 8;
    let report = train_run(&mut model, &xor, &[], &tc, None).unwrap();
    assert_eq!(report.steps, 100);
    assert_eq!(backbone_bits(&model), loaded);
    let m = evaluate(&model, &xor[..100], 32).unwrap();
    assert!((m.accuracy - m.f1_micro).abs() < 1e-12);
}

fn random_store(seed: u64, n: usize) -> ParamStore {
    let mut r = pmf::rng::seeded(seed);
    let mut store = ParamStore::new();
    for i in 0..n {
        let rows = 1 + (seed as usize + i) % 4;
        let cols = 1 + (seed as usize * 7 + i) % 5;
        let dtype = if i % 2 == 0 { DType::F32 } else { DType::F64 };
        let data = pmf::rng::uniform_vec(&mut r, rows * cols, 10.0);
        let t = Tensor::new(vec![rows, cols], dtype, data).unwrap().with_requires_grad(i % 3 == 0);
        store.insert(format!("t{i}"), t);
    }
    store
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn micro_f1_equals_accuracy_for_single_labels(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..80)
    ) {
        let preds: Vec<Label> = pairs.iter().map(|p| Label::Single(p.0)).collect();
        let truth: Vec<Label> = pairs.iter().map(|p| Label::Single(p.1)).collect();
        let m = compute_metrics(&preds, &truth, 4).unwrap();
        prop_assert!((m.accuracy - m.f1_micro).abs() < 1e-12);
        prop_assert!(m.f1_macro <= 1.0 && m.f1_macro >= 0.0);
    }

    #[test]
    fn checkpoints_round_trip_with_ordered_offsets(seed in 0u64..100_000, n in 1usize..8) {
        let store = random_store(seed, n);
        let bytes = encode_checkpoint(&store, &serde_json::json!({"seed": seed})).unwrap();
        let m = manifest(&bytes);
        let mut end = 0;
        for e in &m.tensors {
            prop_assert_eq!(e.offset, end);
            end = e.offset + e.length;
        }
        let header = 16 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        prop_assert_eq!(bytes.len() - header, end);
        let (back, cfg) = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(cfg["seed"].as_u64(), Some(seed));
        prop_assert_eq!(back.len(), store.len());
        for (id, name, t) in store.iter() {
            let b = back.get(id);
            prop_assert_eq!(back.name(id), name);
            prop_assert_eq!(b.dtype(), t.dtype());
            prop_assert_eq!(b.shape(), t.shape());
            prop_assert_eq!(b.requires_grad(), t.requires_grad());
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(b), bits(t));
        }
    }
}
