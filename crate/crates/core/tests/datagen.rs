mod common;

use pmf::datagen::{
    compute_class_weights, compute_multilabel_weights, decode_bits, decoder_accuracy,
    generate_dataset, generate_split, read_dataset, single_bit_task, write_dataset, Label,
    TaskKind, TaskSpec,
};
use pmf::Error;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
}

#[test]
fn joint4_classes_are_balanced() {
    let recs = generate_dataset(&TaskSpec::new(TaskKind::Joint4), 1000, 0).unwrap();
    let mut counts = [0usize; 4];
    for r in &recs {
        counts[r.label.single().unwrap()] += 1;
    }
    // sd of Binomial(1000, 1/4) is about 13.7; 60 is over 4 sd.
    for c in counts {
        assert!((190..=310).contains(&c), "{counts:?}");
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = TaskSpec::new(TaskKind::Xor2);
    let a = generate_dataset(&spec, 50, 9).unwrap();
    let b = generate_dataset(&spec, 50, 9).unwrap();
    assert_eq!(a, b);
    let bits = |r: &pmf::datagen::MultimodalRecord| r.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert!(a.iter().zip(&b).all(|(x, y)| bits(x) == bits(y)));
    assert_ne!(a, generate_dataset(&spec, 50, 10).unwrap());
    // Records are independent of the dataset size.
    let prefix = generate_dataset(&spec, 20, 9).unwrap();
    assert_eq!(&a[..20], &prefix[..]);
    let val = generate_split(&spec, 20, 9, pmf::rng::stream::DATA_VAL).unwrap();
    assert_ne!(val, prefix);
}

#[test]
fn analytic_decoder_accuracy() {
    let mut spec = TaskSpec::new(TaskKind::Xor2);
    spec.noise_sigma = 0.0;
    let clean = generate_dataset(&spec, 500, 1).unwrap();
    assert_eq!(decoder_accuracy(&spec, &clean), 1.0);
    let spec = TaskSpec::new(TaskKind::Xor2);
    let noisy = generate_dataset(&spec, 2000, 1).unwrap();
    assert!(decoder_accuracy(&spec, &noisy) >= 0.99);
}

#[test]
fn invalid_spec_is_rejected() {
    let mut spec = TaskSpec::new(TaskKind::Xor2);
    spec.noise_sigma = -1.0;
    assert!(matches!(generate_dataset(&spec, 5, 0), Err(Error::Config(_))));
    let mut spec = TaskSpec::new(TaskKind::Xor2);
    spec.height = 30;
    assert!(generate_dataset(&spec, 5, 0).is_err());
    let mut spec = TaskSpec::new(TaskKind::Xor2);
    spec.marker_token = 0;
    assert!(generate_dataset(&spec, 5, 0).is_err());
    assert!(generate_dataset(&TaskSpec::new(TaskKind::Xor2), 0, 0).is_err());
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [TaskKind::Xor2, TaskKind::Joint4, TaskKind::Multilabel2] {
        let recs = generate_dataset(&TaskSpec::new(kind), 25, 3).unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&recs, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), recs);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 25);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["image", "shape", "tokens", "label"] {
            assert!(first.get(key).is_some(), "{key}");
        }
    }
}

#[test]
fn malformed_files_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let recs = generate_dataset(&TaskSpec::new(TaskKind::Xor2), 3, 3).unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&recs, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let truncated = format!("{}\n{}\n", lines[0], &lines[1][..lines[1].len() / 2]);
    std::fs::write(&path, truncated).unwrap();
    match read_dataset(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }

    std::fs::write(&path, "{\"image\":[1,2,3,4,5],\"shape\":[2,2,1],\"tokens\":[1],\"label\":0}\n").unwrap();
    match read_dataset(&path) {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 1);
            assert!(msg.contains('5'), "{msg}");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(read_dataset(&dir.path().join("missing.jsonl")).is_err());
}

#[test]
fn class_weight_examples() {
    let labels = |counts: &[usize]| -> Vec<usize> {
        counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect()
    };
    assert!(close(&compute_class_weights(&labels(&[10, 30]), 2).unwrap(), &[2.0, 2.0 / 3.0]));
    assert!(close(&compute_class_weights(&labels(&[7, 7, 7]), 3).unwrap(), &[1.0; 3]));
    assert!(close(
        &compute_class_weights(&labels(&[1, 1, 2]), 3).unwrap(),
        &[4.0 / 3.0, 4.0 / 3.0, 2.0 / 3.0]
    ));
    let err = compute_class_weights(&labels(&[3, 0]), 2).unwrap_err();
    assert!(matches!(err, Error::EmptyClass { class: 1 }));
    assert!(err.to_string().contains("weight"), "{err}");
    let ml = compute_multilabel_weights(&[vec![true, false], vec![true, true]], 2).unwrap();
    assert_eq!(ml.len(), 2);
    assert!(ml[1] > ml[0]);
}

#[test]
fn single_bit_relabeling() {
    let recs = generate_dataset(&TaskSpec::new(TaskKind::Multilabel2), 20, 4).unwrap();
    let img = single_bit_task(&recs, 0).unwrap();
    let txt = single_bit_task(&recs, 1).unwrap();
    for ((r, i), t) in recs.iter().zip(&img).zip(&txt) {
        let Label::Multi(bits) = &r.label else { panic!() };
        assert_eq!(i.label, Label::Single(bits[0] as usize));
        assert_eq!(t.label, Label::Single(bits[1] as usize));
    }
    let xor = generate_dataset(&TaskSpec::new(TaskKind::Xor2), 2, 4).unwrap();
    assert!(single_bit_task(&xor, 0).is_err());
}

/// Pearson chi-square statistic of a 2x2 contingency table.
fn chi_square(table: [[f64; 2]; 2]) -> f64 {
    let n: f64 = table.iter().flatten().sum();
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let mut stat = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let e = rows[i] * cols[j] / n;
            stat += (table[i][j] - e).powi(2) / e;
        }
    }
    stat
}

#[test]
fn xor_label_is_independent_of_each_modality() {
    let spec = TaskSpec::new(TaskKind::Xor2);
    let recs = generate_dataset(&spec, 10_000, 2024).unwrap();
    let chi = ChiSquared::new(1.0).unwrap();
    let mut img = [[0.0; 2]; 2];
    let mut txt = [[0.0; 2]; 2];
    for r in &recs {
        let (a, b) = decode_bits(&spec, r);
        let y = r.label.single().unwrap();
        img[a as usize][y] += 1.0;
        txt[b as usize][y] += 1.0;
    }
    for table in [img, txt] {
        let p = 1.0 - chi.cdf(chi_square(table));
        assert!(p > 0.01, "p = {p}, table {table:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn records_satisfy_task_invariants(seed in 0u64..1_000_000, kind in prop::sample::select(vec![TaskKind::Xor2, TaskKind::Joint4, TaskKind::Multilabel2])) {
        let mut spec = TaskSpec::new(kind);
        spec.noise_sigma = 0.0;
        let recs = generate_dataset(&spec, 12, seed).unwrap();
        for r in &recs {
            prop_assert_eq!(r.image.len(), 32 * 32);
            prop_assert_eq!(r.shape, [32, 32, 1]);
            prop_assert!((spec.min_len..=spec.max_len).contains(&r.tokens.len()));
            prop_assert!(r.tokens.iter().all(|&t| (t as usize) < spec.vocab_size && t != 0));
            let (a, b) = decode_bits(&spec, r);
            prop_assert_eq!(&r.label, &kind.label(a, b));
            match (&r.label, kind) {
                (Label::Single(y), TaskKind::Xor2) => prop_assert_eq!(*y, (a ^ b) as usize),
                (Label::Single(y), TaskKind::Joint4) => prop_assert_eq!(*y, 2 * a as usize + b as usize),
                (Label::Multi(v), TaskKind::Multilabel2) => prop_assert_eq!(v.clone(), vec![a, b]),
                _ => prop_assert!(false, "label kind does not match task"),
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed(seed in 0u64..1_000_000) {
        let spec = TaskSpec::new(TaskKind::Joint4);
        prop_assert_eq!(generate_dataset(&spec, 6, seed).unwrap(), generate_dataset(&spec, 6, seed).unwrap());
    }

    #[test]
    fn class_weights_have_mean_one(labels in prop::collection::vec(0usize..3, 3..60)) {
        prop_assume!((0..3).all(|c| labels.contains(&c)));
        let w = compute_class_weights(&labels, 3).unwrap();
        let mean: f64 = labels.iter().map(|&y| w[y]).sum::<f64>() / labels.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-12);
    }
}
