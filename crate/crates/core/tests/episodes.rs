mod common;

use common::*;
use falcon_core::data_io::{synth_source, PatientVolume, Split};
use falcon_core::episodes::{
    build_inference_task, build_target_task, build_test_tasks, endpoint_spacing, read_task_stream, sample_source_episode,
    source_episode_stream, stride_spacing, write_task_stream, SupportSelection, TaskRecord,
};
use falcon_core::nn::Tensor;
use falcon_core::{BinaryMask, Error};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn volume(n: usize, labeled: &[usize]) -> PatientVolume {
    PatientVolume {
        id: "p".into(),
        split: Split::Train,
        indices: (0..n).collect(),
        slices: (0..n).map(|_| Tensor::full([1, 3, 4, 4], 0.5)).collect(),
        masks: labeled.iter().map(|&i| (i, BinaryMask::zeros(4, 4))).collect(),
    }
}

proptest! {
    #[test]
    fn source_episodes_are_disjoint_and_in_range(seed in any::<u64>(), k in 1usize..4, q in 1usize..4) {
        let ds = synth_source(3, 8, 16, 1).unwrap();
        let e = sample_source_episode(&ds, k, q, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(e.support.len(), k);
        prop_assert_eq!(e.query.len(), q);
        prop_assert!(e.support.iter().all(|s| !e.query.contains(s)));
        prop_assert!(e.support.iter().chain(&e.query).all(|&i| i < 8));
    }

    #[test]
    fn spacing_rules_stay_sorted_and_distinct(n in 1usize..60, k in 1usize..12) {
        prop_assume!(k <= n);
        for picks in [endpoint_spacing(n, k), stride_spacing(n, k)] {
            prop_assert_eq!(picks.len(), k);
            prop_assert!(picks.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(picks.iter().all(|&i| i < n));
        }
    }
}

#[test]
fn spacing_examples() {
    assert_eq!(endpoint_spacing(20, 4), [0, 6, 13, 19]);
    assert_eq!(endpoint_spacing(21, 1), [10]);
    let p = volume(20, &[1, 3, 5, 7, 9, 11, 13, 15, 17, 19]);
    let t = build_target_task(&p, 5, SupportSelection::Uniform, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(t.support, [0, 4, 8, 12, 16]);
    assert_eq!(t.query, [1, 3, 5, 7, 9, 11, 13, 15, 17, 19]);
    let all = build_target_task(&p, 10, SupportSelection::Uniform, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(all.support, p.unlabeled_positions());
    let inf = build_inference_task(&volume(20, &[]), 4).unwrap();
    assert_eq!(inf.support, [0, 6, 13, 19]);
    assert_eq!(inf.query.len(), 20);
}

#[test]
fn target_task_errors() {
    let rng = &mut ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        build_target_task(&volume(6, &[0, 1, 2, 3]), 3, SupportSelection::Uniform, rng),
        Err(Error::InsufficientUnlabeled { .. })
    ));
    assert!(matches!(
        build_target_task(&volume(6, &[]), 3, SupportSelection::Uniform, rng),
        Err(Error::NoLabeledQuery(_))
    ));
    assert!(matches!(build_inference_task(&volume(2, &[]), 3), Err(Error::InsufficientSlices { .. })));
}

#[test]
fn class_frequencies_are_uniform() {
    let ds = synth_source(10, 6, 16, 3).unwrap();
    let eps = source_episode_stream(&ds, 2, 1, 1000, 17).unwrap();
    let mut counts = [0usize; 10];
    for e in &eps {
        counts[e.class_id] += 1;
    }
    // Binomial(1000, 0.1): mean 100, sigma 9.49.
    for c in counts {
        assert!((c as f64 - 100.0).abs() <= 3.0 * 9.4868, "{counts:?}");
    }
}

#[test]
fn task_streams_are_reproducible_bytes() {
    let ds = synth_source(4, 6, 16, 5).unwrap();
    let cohort = toy_cohort(5);
    let test: Vec<&PatientVolume> = cohort.volumes.iter().filter(|v| v.split == Split::Test).collect();
    let stream = |seed: u64| {
        let mut records: Vec<TaskRecord> =
            source_episode_stream(&ds, 3, 2, 20, seed).unwrap().iter().map(|e| TaskRecord::source(e, seed)).collect();
        for (t, s) in build_test_tasks(&test, 10, 3, seed).unwrap() {
            records.push(TaskRecord::inference(&t, s));
        }
        let mut buf = Vec::new();
        write_task_stream(&mut buf, &records).unwrap();
        (records, buf)
    };
    let (records, a) = stream(8);
    let (_, b) = stream(8);
    assert_eq!(a, b);
    assert_ne!(a, stream(9).1);
    assert_eq!(read_task_stream(&a[..]).unwrap(), records);
}

#[test]
fn test_tasks_cycle_patients() {
    let cohort = toy_cohort(6);
    let test: Vec<&PatientVolume> = cohort.volumes.iter().filter(|v| v.split == Split::Test).collect();
    let tasks = build_test_tasks(&test, 5, 3, 0).unwrap();
    let ids: Vec<&str> = tasks.iter().map(|(t, _)| t.patient_id.as_str()).collect();
    assert_eq!(ids, [&test[0].id, &test[1].id, &test[0].id, &test[1].id, &test[0].id].map(|s| s.as_str()));
    // First visit uses the uniform rule.
    assert_eq!(tasks[0].0.support, endpoint_spacing(test[0].len(), 3));
    assert!(tasks.iter().all(|(t, _)| t.query.len() == 12));
}
