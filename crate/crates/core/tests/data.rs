use std::collections::BTreeSet;

use proptest::prelude::*;
use reprobe::data::{generate, iid_split, load_table, read_table, split_tasks, DatasetKind, DatasetSpec};
use reprobe::Error;

fn spec(kind: DatasetKind, n_classes: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        kind,
        n_classes,
        samples_per_class: 20,
        input_dim: 5,
        image_side: 8,
        class_separation: 3.0,
        noise_sigma: 1.0,
        seed,
    }
}

#[test]
fn task_splits_partition_the_classes() {
    let ds = generate(&spec(DatasetKind::GaussianClusters, 12, 0)).unwrap();
    for order_seed in 0..100 {
        let seq = split_tasks(&ds, 4, 3, order_seed).unwrap();
        let mut seen = BTreeSet::new();
        for (t, task) in seq.tasks.iter().enumerate() {
            assert_eq!(task.id, t);
            assert_eq!(task.classes.len(), 3);
            for &c in &task.classes {
                assert!(seen.insert(c), "class {c} in two tasks");
            }
            assert!(task.train.labels.iter().all(|&l| l < 3));
            assert_eq!(task.train.len() + task.test.len(), 3 * 20);
        }
        assert_eq!(seen, (0..12).collect());
    }
    assert!(split_tasks(&ds, 5, 3, 0).is_err());
}

#[test]
fn iid_subsets_are_class_balanced() {
    let ds = generate(&spec(DatasetKind::GaussianClusters, 4, 1)).unwrap();
    let seq = iid_split(&ds, 4, 9).unwrap();
    assert!(seq.shared_head);
    let mut all_ids = BTreeSet::new();
    for task in &seq.tasks {
        for c in 0..4 {
            let n = task.train.labels.iter().filter(|&&l| l == c).count();
            assert_eq!(n, 4);
        }
        assert_eq!(task.test, ds.test);
        all_ids.extend(task.train.ids.iter().copied());
    }
    assert_eq!(all_ids.len(), ds.train.len());
}

#[test]
fn every_generator_is_deterministic() {
    for kind in [
        DatasetKind::GaussianClusters,
        DatasetKind::ConcentricSpirals,
        DatasetKind::GridImages,
    ] {
        let a = generate(&spec(kind, 4, 3)).unwrap();
        assert_eq!(a, generate(&spec(kind, 4, 3)).unwrap());
        assert_ne!(a, generate(&spec(kind, 4, 4)).unwrap());
    }
}

#[test]
fn csv_errors_report_lines() {
    let ragged = "label,f0,f1\n0,1.0,2.0\n1,3.0\n";
    match read_table(ragged.as_bytes()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let bad = "label,f0\n0,1.0\n1,2.0\n0,abc\n";
    match read_table(bad.as_bytes()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }
    assert!(read_table("x,f0\n0,1\n".as_bytes()).is_err());
    assert!(read_table("label,f0\n".as_bytes()).is_err());
}

#[test]
fn csv_round_trip() {
    let ds = generate(&spec(DatasetKind::GaussianClusters, 3, 5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    ds.write_csv(&path).unwrap();
    let back = load_table(&path).unwrap();
    assert_eq!(back.n_classes, 3);
    assert_eq!(back.feature_dim(), 5);
    assert_eq!(back.train.len() + back.test.len(), 60);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generated_splits_hold_every_class(seed in 0u64..10_000, n_classes in 2usize..6) {
        let ds = generate(&spec(DatasetKind::GaussianClusters, n_classes, seed)).unwrap();
        prop_assert_eq!(ds.train.len(), n_classes * 16);
        prop_assert_eq!(ds.test.len(), n_classes * 4);
        for c in 0..n_classes {
            prop_assert!(ds.test.labels.contains(&c));
        }
        prop_assert!(ds.train.x.is_finite());
    }
}
