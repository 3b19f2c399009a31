use proptest::prelude::*;
use tfmamba_core::data::{
    compute_metrics, load_feature_file, make_folds, nearest_carrier, stratified_folds,
    synth_generate, Dataset, DatasetManifest, Envelope, LabelMap, ManifestRow, SyntheticSpec,
};
use tfmamba_core::Error;

fn confusion(k: usize) -> impl Strategy<Value = Vec<Vec<u64>>> {
    prop::collection::vec(prop::collection::vec(0u64..20, k), k)
        .prop_filter("some count", |m| m.iter().flatten().any(|&c| c > 0))
}

proptest! {
    #[test]
    fn metrics_bounded(m in (2usize..6).prop_flat_map(confusion)) {
        let r = compute_metrics(&m).unwrap();
        for v in [r.wa, r.ua, r.wf1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn metrics_permutation_invariant(
        (m, perm) in (2usize..6).prop_flat_map(|k| (confusion(k), Just((0..k).collect::<Vec<_>>()).prop_shuffle())),
    ) {
        let k = m.len();
        let permuted: Vec<Vec<u64>> = (0..k).map(|i| (0..k).map(|j| m[perm[i]][perm[j]]).collect()).collect();
        let (a, b) = (compute_metrics(&m).unwrap(), compute_metrics(&permuted).unwrap());
        prop_assert!((a.wa - b.wa).abs() < 1e-12);
        prop_assert!((a.ua - b.ua).abs() < 1e-12);
        prop_assert!((a.wf1 - b.wf1).abs() < 1e-12);
    }

    #[test]
    fn folds_partition(labels in prop::collection::vec(0usize..4, 5..60), n_folds in 2usize..6, seed: u64) {
        let folds = stratified_folds(&labels, n_folds, seed).unwrap();
        let mut count = vec![0; labels.len()];
        for f in &folds {
            prop_assert_eq!(f.train.len() + f.test.len(), labels.len());
            for &i in &f.test {
                count[i] += 1;
                prop_assert!(!f.train.contains(&i));
            }
        }
        prop_assert!(count.iter().all(|&c| c == 1));
    }
}

#[test]
fn noiseless_carriers_are_perfectly_separable() {
    let spec = SyntheticSpec::both_cues(4, 10, 64, 32, 0.0, 3);
    let data = synth_generate(&spec).unwrap();
    for f in &data {
        assert_eq!(nearest_carrier(f.features(), &spec.carriers).unwrap(), f.label as usize);
    }
}

#[test]
fn shared_carrier_is_uninformative() {
    let mut spec = SyntheticSpec::both_cues(4, 50, 64, 32, 0.1, 4);
    spec.carriers = vec![9; 4];
    let data = synth_generate(&spec).unwrap();
    let hits = data
        .iter()
        .filter(|f| nearest_carrier(f.features(), &spec.carriers).unwrap() == f.label as usize)
        .count();
    let acc = hits as f64 / data.len() as f64;
    assert!((acc - 0.25).abs() <= 0.05, "{acc}");
    assert_ne!(spec.envelopes[0], spec.envelopes[1]);
}

#[test]
fn generation_is_seeded() {
    let spec = SyntheticSpec::frequency_only(3, 4, 16, 6, 0.3, 9);
    let a = synth_generate(&spec).unwrap();
    let b = synth_generate(&spec).unwrap();
    assert_eq!(a.len(), 12);
    let bytes = |d: &[tfmamba_core::data::FeatureFile]| {
        d.iter().map(|f| f.to_bytes().unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(bytes(&a), bytes(&b));
    let other = synth_generate(&SyntheticSpec { seed: 10, ..spec.clone() }).unwrap();
    assert_ne!(bytes(&a), bytes(&other));
    assert!(spec.envelopes.iter().all(|&e| e == Envelope::Flat));
}

fn write_corpus(dir: &std::path::Path, spec: &SyntheticSpec) -> DatasetManifest {
    let data = synth_generate(spec).unwrap();
    let labels = LabelMap::new(spec.class_names()).unwrap();
    let mut rows = Vec::new();
    for f in &data {
        let name = format!("{}.tff", f.id);
        f.write(dir.join(&name)).unwrap();
        rows.push(ManifestRow {
            path: name,
            label: labels.classes[f.label as usize].clone(),
            fold_hint: None,
        });
    }
    DatasetManifest::write(dir.join("manifest.csv"), &labels, &rows).unwrap();
    DatasetManifest::load(dir.join("manifest.csv")).unwrap()
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::both_cues(2, 5, 8, 3, 0.1, 1);
    let manifest = write_corpus(dir.path(), &spec);
    assert_eq!(manifest.entries.len(), 10);
    assert_eq!(manifest.labels.classes, vec!["class0", "class1"]);
    let ds = Dataset::load(&manifest).unwrap();
    assert_eq!(ds.label_ids(), manifest.labels());
    assert_eq!(ds.samples, synth_generate(&spec).unwrap());
    let folds = make_folds(&manifest, 5, 0).unwrap();
    assert!(folds.iter().all(|f| f.test.len() == 2));
}

#[test]
fn manifest_label_disagreement() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::both_cues(2, 2, 8, 3, 0.1, 1);
    write_corpus(dir.path(), &spec);
    let csv = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    let swapped = csv.replacen("c0_0000.tff,class0", "c0_0000.tff,class1", 1);
    std::fs::write(dir.path().join("manifest.csv"), swapped).unwrap();
    let manifest = DatasetManifest::load(dir.path().join("manifest.csv")).unwrap();
    assert!(matches!(Dataset::load(&manifest), Err(Error::LabelMismatch(_))));
    let unknown = csv.replacen("class0", "joy", 1);
    std::fs::write(dir.path().join("manifest.csv"), unknown).unwrap();
    assert!(matches!(
        DatasetManifest::load(dir.path().join("manifest.csv")),
        Err(Error::LabelMismatch(_))
    ));
}

#[test]
fn missing_feature_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_feature_file(dir.path().join("absent.tff")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}
