use std::collections::BTreeSet;

use fenec::feature_store::{load_split_file, parse_header, read_feature_header, FENC_MAGIC};
use fenec::{build_task_stream, load_feature_file, write_feature_file, FeatureBatch, FenecError};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn fenc_bytes(n: u32, f: u32, payload: &[f32], labels: &[u32]) -> Vec<u8> {
    let mut out = FENC_MAGIC.to_vec();
    out.push(1);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&f.to_le_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

fn labelled(labels: &[u32], n_features: usize) -> FeatureBatch {
    let n = labels.len();
    let x = DMatrix::from_fn(n, n_features, |i, j| (i * n_features + j) as f64 * 0.25);
    FeatureBatch::new(x, labels.to_vec()).unwrap()
}

#[test]
fn two_by_three_file_loads_exactly() {
    let bytes = fenc_bytes(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0, 1]);
    let batch = FeatureBatch::from_bytes(&bytes).unwrap();
    assert_eq!(
        batch.features(),
        &DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    );
    assert_eq!(batch.labels(), &[0, 1]);
    assert_eq!(batch.to_bytes(), bytes);
}

#[test]
fn overstated_sample_count_is_corruption() {
    let bytes = fenc_bytes(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0, 1]);
    assert!(matches!(
        FeatureBatch::from_bytes(&bytes),
        Err(FenecError::Corrupt(_))
    ));
}

#[test]
fn trailing_bytes_are_corruption() {
    let mut bytes = fenc_bytes(1, 1, &[1.0], &[0]);
    bytes.push(0);
    assert!(matches!(
        FeatureBatch::from_bytes(&bytes),
        Err(FenecError::Corrupt(_))
    ));
}

#[test]
fn wrong_magic_and_version() {
    let mut bytes = fenc_bytes(1, 1, &[1.0], &[0]);
    bytes[0] = b'X';
    assert!(matches!(
        FeatureBatch::from_bytes(&bytes),
        Err(FenecError::Format(_))
    ));
    let mut bytes = fenc_bytes(1, 1, &[1.0], &[0]);
    bytes[4] = 9;
    assert!(matches!(
        FeatureBatch::from_bytes(&bytes),
        Err(FenecError::Format(_))
    ));
}

#[test]
fn non_finite_payload_rejected() {
    let bytes = fenc_bytes(1, 2, &[1.0, f32::NAN], &[0]);
    assert!(FeatureBatch::from_bytes(&bytes).is_err());
}

#[test]
fn vit_scale_header_accepted() {
    let (n, f) = (50_000u32, 768u32);
    let mut bytes = fenc_bytes(n, f, &[], &[]);
    assert_eq!(parse_header(&bytes).unwrap(), (50_000, 768));
    bytes.resize(bytes.len() + (n * f) as usize * 4, 0);
    for i in 0..n {
        bytes.extend_from_slice(&(i % 100).to_le_bytes());
    }
    let batch = FeatureBatch::from_bytes(&bytes).unwrap();
    assert_eq!(batch.n_samples(), 50_000);
    assert_eq!(batch.n_features(), 768);
    assert_eq!(batch.classes().len(), 100);
}

#[test]
fn file_round_trip_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.fenc");
    let batch = labelled(&[3, 1, 3, 2], 5);
    write_feature_file(&path, &batch).unwrap();
    assert_eq!(read_feature_header(&path).unwrap(), (4, 5));
    assert_eq!(load_feature_file(&path).unwrap(), batch);
}

#[test]
fn missing_file_error_names_the_path() {
    let err = load_feature_file("/nonexistent/features.fenc").unwrap_err();
    assert!(matches!(err, FenecError::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/features.fenc"));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn fifty_then_tens_split() {
    let labels: Vec<u32> = (0..100).flat_map(|c| [c, c]).collect();
    let batch = labelled(&labels, 2);
    let mut split = vec![(0..50).collect::<Vec<u32>>()];
    for t in 0..5 {
        split.push((50 + 10 * t..60 + 10 * t).collect());
    }
    let stream = build_task_stream(&batch, &batch, &split).unwrap();
    assert_eq!(stream.len(), 6);
    let counts: Vec<usize> = stream
        .cumulative_classes()
        .iter()
        .map(BTreeSet::len)
        .collect();
    assert_eq!(counts, [50, 60, 70, 80, 90, 100]);
    for (t, task) in stream.tasks().iter().enumerate() {
        assert_eq!(task.train().classes().len(), split[t].len());
        assert_eq!(task.n_test(), 2 * counts[t]);
        assert_eq!(task.test().classes(), stream.cumulative_classes()[t]);
    }
}

#[test]
fn ten_tasks_of_twenty() {
    let labels: Vec<u32> = (0..200).collect();
    let batch = labelled(&labels, 1);
    let split: Vec<Vec<u32>> = (0..10).map(|t| (20 * t..20 * t + 20).collect()).collect();
    let stream = build_task_stream(&batch, &batch, &split).unwrap();
    let counts: Vec<usize> = stream
        .cumulative_classes()
        .iter()
        .map(BTreeSet::len)
        .collect();
    assert_eq!(counts, (1..=10).map(|t| 20 * t).collect::<Vec<_>>());
}

#[test]
fn single_task_uses_the_full_test_set() {
    let train = labelled(&[0, 1, 2, 0, 1, 2], 3);
    let test = labelled(&[2, 2, 1, 0], 3);
    let stream = build_task_stream(&train, &test, &[vec![2, 0, 1]]).unwrap();
    assert_eq!(stream.len(), 1);
    assert_eq!(stream.tasks()[0].test(), test);
    assert_eq!(stream.tasks()[0].train(), &train);
}

#[test]
fn malformed_splits() {
    let batch = labelled(&[0, 1, 2], 2);
    assert!(matches!(
        build_task_stream(&batch, &batch, &[]),
        Err(FenecError::Split(_))
    ));
    assert!(matches!(
        build_task_stream(&batch, &batch, &[vec![0, 1], vec![]]),
        Err(FenecError::Split(_))
    ));
    assert!(matches!(
        build_task_stream(&batch, &batch, &[vec![0, 1], vec![1, 2]]),
        Err(FenecError::Split(_))
    ));
    let err = build_task_stream(&batch, &batch, &[vec![0, 1]]).unwrap_err();
    assert!(matches!(err, FenecError::Coverage { label: 2 }));
    let narrow = labelled(&[0, 1, 2], 1);
    assert!(matches!(
        build_task_stream(&batch, &narrow, &[vec![0, 1, 2]]),
        Err(FenecError::Shape(_))
    ));
}

#[test]
fn split_file_parsing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("split.json");
    std::fs::write(&path, "[[4, 5], [6]]").unwrap();
    assert_eq!(load_split_file(&path).unwrap(), vec![vec![4, 5], vec![6]]);
    std::fs::write(&path, "{\"tasks\": 1}").unwrap();
    assert!(load_split_file(&path).is_err());
}

fn batch_strategy() -> impl Strategy<Value = FeatureBatch> {
    (1usize..20, 1usize..6).prop_flat_map(|(n, f)| {
        (
            prop::collection::vec(-1e6f32..1e6, n * f),
            prop::collection::vec(0u32..50, n),
        )
            .prop_map(move |(payload, labels)| {
                let x = DMatrix::from_row_iterator(n, f, payload.into_iter().map(f64::from));
                FeatureBatch::new(x, labels).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn byte_round_trip_is_identity(batch in batch_strategy()) {
        let bytes = batch.to_bytes();
        let back = FeatureBatch::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &batch);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_is_always_detected(batch in batch_strategy(), cut in 1usize..64) {
        let bytes = batch.to_bytes();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(FeatureBatch::from_bytes(&bytes[..keep]).is_err());
    }

    #[test]
    fn tasks_partition_the_classes(n_classes in 1u32..30, n_tasks in 1usize..6, seed in any::<u64>()) {
        let n_tasks = n_tasks.min(n_classes as usize);
        let mut ids: Vec<u32> = (0..n_classes).collect();
        // deterministic shuffle from the seed
        ids.sort_by_key(|c| (u64::from(*c) ^ seed).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let split: Vec<Vec<u32>> = (0..n_tasks)
            .map(|t| ids.iter().skip(t).step_by(n_tasks).copied().collect())
            .collect();
        let labels: Vec<u32> = (0..n_classes).flat_map(|c| [c, c, c]).collect();
        let batch = labelled(&labels, 2);
        let stream = build_task_stream(&batch, &batch, &split).unwrap();
        let mut seen = BTreeSet::new();
        let mut train_rows = 0;
        for (t, task) in stream.tasks().iter().enumerate() {
            let classes: BTreeSet<u32> = task.classes().iter().copied().collect();
            prop_assert!(seen.is_disjoint(&classes));
            seen.extend(classes);
            prop_assert_eq!(&stream.cumulative_classes()[t], &seen);
            prop_assert_eq!(task.n_test(), 3 * seen.len());
            train_rows += task.train().n_samples();
        }
        prop_assert_eq!(seen.len(), n_classes as usize);
        prop_assert_eq!(train_rows, batch.n_samples());
    }
}
