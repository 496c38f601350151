use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::error::FormatError;

fn small(seed: u64) -> GeneratorConfig {
    GeneratorConfig::new(4, 20, 5, 4, 6, 0.1, seed)
}

fn nearest_prototype(x: &[f32], protos: &[&[f32]]) -> usize {
    let d = |p: &[f32]| x.iter().zip(p).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>();
    let mut best = 0;
    for (i, p) in protos.iter().enumerate() {
        if d(p) < d(protos[best]) {
            best = i;
        }
    }
    best
}

#[test]
fn noiseless_identity_positions_repeat() {
    let mut cfg = small(1);
    cfg.noise_sigma = 0.0;
    cfg.identity_distortion = true;
    let ds = generate(&cfg).unwrap();
    for m in Modality::BOTH {
        let mut seen: Vec<Option<Vec<f32>>> = vec![None; cfg.concepts];
        for inst in &ds.instances {
            let seq = inst.sequence(m);
            for l in 0..seq.len() {
                let row = seq.row(l, ds.d_in).to_vec();
                match &seen[seq.labels[l] as usize] {
                    Some(prev) => assert_eq!(prev, &row),
                    None => seen[seq.labels[l] as usize] = Some(row),
                }
            }
        }
    }
    // Identity distortion: both modalities share prototypes.
    for c in &ds.concepts {
        assert_eq!(c.prototype_a, c.prototype_b);
    }
}

#[test]
fn noiseless_positions_are_recoverable_by_nearest_prototype() {
    let mut cfg = GeneratorConfig::default();
    cfg.noise_sigma = 0.0;
    cfg.instances = 200;
    let ds = generate(&cfg).unwrap();
    for m in Modality::BOTH {
        let protos: Vec<&[f32]> = ds
            .concepts
            .iter()
            .map(|c| match m {
                Modality::A => c.prototype_a.as_slice(),
                Modality::B => c.prototype_b.as_slice(),
            })
            .collect();
        for inst in &ds.instances {
            let seq = inst.sequence(m);
            for l in 0..seq.len() {
                assert_eq!(nearest_prototype(seq.row(l, ds.d_in), &protos), seq.labels[l] as usize);
            }
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate(&small(5)).unwrap();
    let b = generate(&small(5)).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    let c = generate(&small(6)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn generated_instances_satisfy_pairing_invariants() {
    let cfg = GeneratorConfig::default();
    let ds = generate(&cfg).unwrap();
    assert_eq!(ds.len(), 2000);
    for (k, inst) in ds.instances.iter().enumerate() {
        assert_eq!(inst.id, k as u64);
        assert_eq!(inst.a.len(), 9);
        assert_eq!(inst.b.len(), 6);
        let sa: BTreeSet<u16> = inst.a.labels.iter().copied().collect();
        let sb: BTreeSet<u16> = inst.b.labels.iter().copied().collect();
        assert_eq!(sa, sb);
        assert!((1..=3).contains(&sa.len()));
        assert_eq!(generate::dominant_label(&inst.a.labels), Some(inst.label));
        assert_eq!(generate::dominant_label(&inst.b.labels), Some(inst.label));
    }
}

#[test]
fn invalid_sizes_are_rejected() {
    for cfg in [
        GeneratorConfig::new(1, 10, 3, 3, 4, 0.1, 0),
        GeneratorConfig::new(4, 1, 3, 3, 4, 0.1, 0),
        GeneratorConfig::new(4, 10, 0, 3, 4, 0.1, 0),
        GeneratorConfig::new(4, 10, 3, 3, 0, 0.1, 0),
        GeneratorConfig::new(4, 10, 3, 3, 4, -0.1, 0),
    ] {
        assert!(matches!(generate(&cfg), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn round_trip_is_exact() {
    let ds = generate(&small(2)).unwrap();
    let bytes = ds.to_bytes().unwrap();
    let back = PairedDataset::from_bytes(&bytes).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.cmds");
    ds.save(&path).unwrap();
    assert_eq!(PairedDataset::load(&path).unwrap(), ds);
}

#[test]
fn corrupt_magic_names_expected_magic() {
    let mut bytes = generate(&small(2)).unwrap().to_bytes().unwrap();
    bytes[0] = b'X';
    let err = PairedDataset::from_bytes(&bytes).unwrap_err();
    match err {
        Error::Format(FormatError::BadMagic { ref expected, .. }) => assert_eq!(expected, "CMDS"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("CMDS"));
}

#[test]
fn version_mismatch_is_typed() {
    let mut bytes = generate(&small(2)).unwrap().to_bytes().unwrap();
    bytes[4] = 9;
    assert!(matches!(
        PairedDataset::from_bytes(&bytes),
        Err(Error::Format(FormatError::Version { expected: 1, found: 9 }))
    ));
}

#[test]
fn truncation_reports_offset() {
    let bytes = generate(&small(2)).unwrap().to_bytes().unwrap();
    let cut = bytes.len() - 7;
    match PairedDataset::from_bytes(&bytes[..cut]) {
        Err(Error::Format(FormatError::Truncated { offset, needed })) => {
            assert!(offset <= cut);
            assert!(needed > 0);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(
        PairedDataset::from_bytes(&bytes[..3]),
        Err(Error::Format(FormatError::Truncated { offset: 0, needed: 1 }))
    ));
}

#[test]
fn trailing_bytes_are_malformed() {
    let mut bytes = generate(&small(2)).unwrap().to_bytes().unwrap();
    bytes.push(0);
    assert!(matches!(
        PairedDataset::from_bytes(&bytes),
        Err(Error::Format(FormatError::Malformed { .. }))
    ));
}

#[test]
fn ten_items_in_pairs_make_five_batches() {
    let b = batches(10, 2, 7, 0).unwrap();
    assert_eq!(b.len(), 5);
    let all: BTreeSet<usize> = b.iter().flatten().copied().collect();
    assert_eq!(all, (0..10).collect());
    assert_eq!(b, batches(10, 2, 7, 0).unwrap());
}

#[test]
fn short_batch_is_dropped() {
    let b = batches(10, 3, 1, 0).unwrap();
    assert_eq!(b.len(), 3);
    assert!(b.iter().all(|x| x.len() == 3));
}

#[test]
fn oversized_batch_is_rejected() {
    assert!(matches!(batches(10, 11, 0, 0), Err(Error::Config(_))));
    assert!(matches!(batches(10, 0, 0, 0), Err(Error::Config(_))));
}

#[test]
fn epochs_get_distinct_orders() {
    let orders: BTreeSet<Vec<Vec<usize>>> = (0..20).map(|e| batches(50, 5, 3, e).unwrap()).collect();
    assert_eq!(orders.len(), 20);
}

#[test]
fn batch_stacks_sequences() {
    let ds = generate(&small(3)).unwrap();
    let b = ds.batch(&[2, 0], Modality::A).unwrap();
    assert_eq!(b.offsets, vec![0, 5, 10]);
    assert_eq!(b.ids, vec![2, 0]);
    assert_eq!(b.features.row(5)[0], f64::from(ds.instances[0].a.features[0]));
    assert!(matches!(ds.batch(&[99], Modality::A), Err(Error::Index { .. })));
}

#[test]
fn split_keeps_concepts() {
    let ds = generate(&small(3)).unwrap();
    let (train, test) = ds.split_at(15).unwrap();
    assert_eq!((train.len(), test.len()), (15, 5));
    assert_eq!(test.instances[0].id, 15);
    assert_eq!(train.concepts, test.concepts);
    test.validate().unwrap();
    assert!(ds.split_at(20).is_err());
}

#[test]
fn import_from_json() {
    let text = r#"{
        "concepts": [{"name": "juggling", "token": "juggles"}, {"name": "kicking"}],
        "instances": [
            {"label": 1, "a": {"features": [[0.5, 1.0]]}, "b": {"features": [[1.0, 2.0], [3.0, 4.0]], "labels": [0, 1]}},
            {"a": {"features": [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], "labels": [0, 0, 1]}, "b": {"features": [[1.0, 1.0]]}}
        ]
    }"#;
    let ds = ImportedDataset::from_json(text).unwrap().into_dataset().unwrap();
    assert_eq!(ds.d_in, 2);
    assert_eq!(ds.concepts[1].token, "kicking");
    assert_eq!(ds.instances[0].a.labels, vec![1]);
    assert_eq!(ds.instances[1].label, 0);
    assert_eq!(ds.instances[1].b.labels, vec![0]);
    let back = PairedDataset::from_bytes(&ds.to_bytes().unwrap()).unwrap();
    assert_eq!(back, ds);

    let bad = r#"{"concepts": [{"name": "x"}], "instances": [{"label": 0, "a": {"features": [[1.0]]}, "b": {"features": [[1.0, 2.0]]}}]}"#;
    assert!(matches!(ImportedDataset::from_json(bad).unwrap().into_dataset(), Err(Error::Dimension { .. })));
    let unknown = r#"{"concepts": [{"name": "x"}], "instances": [{"label": 3, "a": {"features": [[1.0]]}, "b": {"features": [[2.0]]}}]}"#;
    assert!(matches!(ImportedDataset::from_json(unknown).unwrap().into_dataset(), Err(Error::Index { .. })));
    let missing = "{\"concepts\": []\n}";
    assert!(matches!(
        ImportedDataset::from_json(missing),
        Err(Error::Format(FormatError::Json { line: 2, .. }))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn random_datasets_round_trip_byte_exactly(
        seed in any::<u64>(),
        concepts in 2usize..6,
        instances in 2usize..8,
        len_a in 1usize..6,
        len_b in 1usize..6,
        d_in in 1usize..5,
        sigma in 0.0f64..1.0,
    ) {
        let cfg = GeneratorConfig {
            min_separation: 0.0,
            ..GeneratorConfig::new(concepts, instances, len_a, len_b, d_in, sigma, seed)
        };
        let ds = generate(&cfg).unwrap();
        let bytes = ds.to_bytes().unwrap();
        let back = PairedDataset::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn batches_are_disjoint_and_full(n in 1usize..60, size in 1usize..10, seed in any::<u64>(), epoch in 0u64..50) {
        prop_assume!(size <= n);
        let b = batches(n, size, seed, epoch).unwrap();
        prop_assert_eq!(b.len(), n / size);
        let flat: Vec<usize> = b.iter().flatten().copied().collect();
        let uniq: BTreeSet<usize> = flat.iter().copied().collect();
        prop_assert_eq!(uniq.len(), flat.len());
        prop_assert!(flat.iter().all(|&i| i < n));
    }
}
