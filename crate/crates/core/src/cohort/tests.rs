use super::*;
use crate::error::HydaError;
use crate::probe::LogisticProbe;

fn small_spec() -> SynthSpec {
    SynthSpec {
        subjects: 24,
        imaging: 2,
        tabular: true,
        emb_dim: 16,
        map_dims: [3, 2, 2, 2],
        classes: 2,
        imbalance: 2.0,
        complementarity: 0.5,
        noise: 0.1,
    }
}

fn modality_rows(ds: &CohortDataset, names: &[&str], idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter()
        .map(|&i| {
            let s = &ds.subjects[i];
            names
                .iter()
                .flat_map(|n| match s.embeddings.get(*n) {
                    Some(e) => e.clone(),
                    None => s.tabular.clone().unwrap(),
                })
                .collect()
        })
        .collect()
}

#[test]
fn class_counts_follow_imbalance() {
    let spec = SynthSpec {
        subjects: 190,
        imbalance: 146.0 / 44.0,
        emb_dim: 8,
        map_dims: [2, 2, 2, 2],
        ..SynthSpec::default()
    };
    let ds = synth_cohort(&spec, 0).unwrap();
    assert_eq!(ds.class_counts(), vec![146, 44]);
    assert_eq!(ds.positive_class(), 1);
}

#[test]
fn infeasible_sizes_rejected() {
    let spec = SynthSpec {
        subjects: 10,
        imbalance: 50.0,
        ..small_spec()
    };
    assert!(matches!(synth_cohort(&spec, 0), Err(HydaError::Config(_))));
    let spec = SynthSpec {
        subjects: 3,
        ..small_spec()
    };
    assert!(matches!(synth_cohort(&spec, 0), Err(HydaError::Config(_))));
    let spec = SynthSpec {
        complementarity: 1.5,
        ..small_spec()
    };
    assert!(matches!(synth_cohort(&spec, 0), Err(HydaError::Config(_))));
}

#[test]
fn generation_is_deterministic() {
    let a = synth_cohort(&small_spec(), 42).unwrap();
    let b = synth_cohort(&small_spec(), 42).unwrap();
    assert_eq!(a, b);
    let c = synth_cohort(&small_spec(), 43).unwrap();
    assert_ne!(a, c);
}

#[test]
fn noiseless_shared_view_is_linearly_separable() {
    let spec = SynthSpec {
        subjects: 60,
        noise: 0.0,
        complementarity: 0.0,
        emb_dim: 16,
        map_dims: [2, 2, 2, 2],
        ..SynthSpec::default()
    };
    let ds = synth_cohort(&spec, 3).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let rows = modality_rows(&ds, &["mri"], &idx);
    let probe = LogisticProbe::fit(&rows, &ds.labels(), 2, 0.0, 3000);
    assert_eq!(probe.accuracy(&rows, &ds.labels()), 1.0);
}

#[test]
fn complementary_modalities_beat_any_single_one() {
    // held-out probe accuracy with kappa = 1 and two imaging modalities
    for seed in 0..5 {
        let spec = SynthSpec {
            subjects: 400,
            imaging: 2,
            tabular: false,
            emb_dim: 16,
            map_dims: [2, 2, 2, 2],
            imbalance: 1.0,
            complementarity: 1.0,
            noise: 0.1,
            ..SynthSpec::default()
        };
        let ds = synth_cohort(&spec, seed).unwrap();
        let labels = ds.labels();
        let train: Vec<usize> = (0..200).collect();
        let test: Vec<usize> = (200..400).collect();
        let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let yte: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
        let acc = |names: &[&str]| {
            let p = LogisticProbe::fit(&modality_rows(&ds, names, &train), &ytr, 2, 1e-3, 500);
            p.accuracy(&modality_rows(&ds, names, &test), &yte)
        };
        let both = acc(&["mri", "pet"]);
        for single in ["mri", "pet"] {
            let a = acc(&[single]);
            assert!(a < both, "seed {seed}: {single} {a} vs both {both}");
        }
    }
}

#[test]
fn normalize_examples() {
    let mut ds = synth_cohort(&small_spec(), 1).unwrap();
    // feature 0 of mri spans [2, 6]; feature 1 is constant
    for (i, s) in ds.subjects.iter_mut().enumerate() {
        let e = s.embeddings.get_mut("mri").unwrap();
        e[0] = 2.0 + 4.0 * (i % 3) as f64 / 2.0;
        e[1] = 7.5;
    }
    let n = normalize(&ds).unwrap();
    for (s, raw) in n.subjects.iter().zip(&ds.subjects) {
        let e = &s.embeddings["mri"];
        if raw.embeddings["mri"][0] == 4.0 {
            assert_eq!(e[0], 0.5);
        }
        assert_eq!(e[1], 0.0);
        assert!(e.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s
            .tabular
            .as_ref()
            .unwrap()
            .iter()
            .all(|v| (0.0..=1.0).contains(v)));
    }
    let twice = normalize(&n).unwrap();
    for (a, b) in twice.subjects.iter().zip(&n.subjects) {
        for (x, y) in a.embeddings["pet"].iter().zip(&b.embeddings["pet"]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(a.feature_maps, b.feature_maps);
    }
}

#[test]
fn scaler_fitted_on_train_clips_validation() {
    let ds = synth_cohort(&small_spec(), 2).unwrap();
    let scaler = MinMaxScaler::fit(&ds, &[0, 1, 2, 3]).unwrap();
    let out = scaler.apply(&ds).unwrap();
    for s in &out.subjects {
        assert!(s.embeddings["mri"].iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn kfold_sizes_and_partition() {
    let labels: Vec<usize> = (0..190).map(|i| usize::from(i >= 146)).collect();
    let splits = kfold_split(&labels, 5, 9).unwrap();
    assert_eq!(splits.len(), 5);
    let mut seen = vec![0; 190];
    for s in &splits {
        assert_eq!(s.val_ids.len(), 38);
        assert_eq!(s.train_ids.len() + s.val_ids.len(), 190);
        let pos = s.val_ids.iter().filter(|&&i| labels[i] == 1).count() as f64;
        assert!((pos - 44.0 / 5.0).abs() <= 1.0);
        for &i in &s.val_ids {
            seen[i] += 1;
            assert!(!s.train_ids.contains(&i));
        }
    }
    assert!(seen.iter().all(|&c| c == 1));
}

#[test]
fn kfold_small_balanced_and_errors() {
    let labels = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
    let splits = kfold_split(&labels, 5, 0).unwrap();
    for s in &splits {
        assert_eq!(s.val_ids.len(), 2);
        assert_eq!(s.val_ids.iter().filter(|&&i| labels[i] == 1).count(), 1);
    }
    let labels = vec![0, 0, 0, 0, 0, 0, 0, 0, 1, 1];
    assert!(matches!(kfold_split(&labels, 5, 0), Err(HydaError::Config(_))));
    assert!(matches!(kfold_split(&labels, 1, 0), Err(HydaError::Config(_))));
    assert_eq!(
        kfold_split(&labels, 2, 4).unwrap(),
        kfold_split(&labels, 2, 4).unwrap()
    );
}

#[test]
fn cohort_round_trip_is_f32_exact() {
    let ds = synth_cohort(&small_spec(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_cohort(&ds, dir.path()).unwrap();
    let back = load_cohort(dir.path()).unwrap();
    assert_eq!(back, ds.rounded_to_f32());
}

#[test]
fn truncated_tensor_is_format_error() {
    let ds = synth_cohort(&small_spec(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_cohort(&ds, dir.path()).unwrap();
    let victim = dir.path().join("tensors/S0003.pet.map.f32");
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
    match load_cohort(dir.path()) {
        Err(HydaError::Format(msg)) => assert!(msg.contains("S0003.pet.map.f32"), "{msg}"),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn flipped_byte_is_checksum_error() {
    let ds = synth_cohort(&small_spec(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_cohort(&ds, dir.path()).unwrap();
    let victim = dir.path().join("tensors/S0001.mri.emb.f32");
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes[0] ^= 0x40;
    std::fs::write(&victim, &bytes).unwrap();
    match load_cohort(dir.path()) {
        Err(HydaError::Format(msg)) => assert!(msg.contains("checksum"), "{msg}"),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn missing_modality_entry_is_format_error() {
    let ds = synth_cohort(&small_spec(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_cohort(&ds, dir.path()).unwrap();
    let mpath = dir.path().join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
    m["subjects"][2]["files"]
        .as_object_mut()
        .unwrap()
        .remove("tabular");
    std::fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
    match load_cohort(dir.path()) {
        Err(HydaError::Format(msg)) => assert!(msg.contains("tabular"), "{msg}"),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn saved_files_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_cohort(&synth_cohort(&small_spec(), 8).unwrap(), a.path()).unwrap();
    save_cohort(&synth_cohort(&small_spec(), 8).unwrap(), b.path()).unwrap();
    for rel in [
        "manifest.json",
        "tensors/S0010.mri.map.f32",
        "tensors/S0007.tabular.f32",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(rel)).unwrap(),
            std::fs::read(b.path().join(rel)).unwrap()
        );
    }
}
