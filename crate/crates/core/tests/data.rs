use std::collections::BTreeMap;
use std::sync::Arc;

use ihq::data::*;
use ihq::synthetic::{clustered_manifest, jitter_variants, replica_counts, replica_manifest, SyntheticSpec};
use ihq::Error;
use proptest::prelude::*;

fn small(per_class: usize, variants: bool) -> Manifest {
    clustered_manifest(&SyntheticSpec {
        per_class,
        variants,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

#[test]
fn replica_totals_and_split() {
    let m = replica_manifest(0).unwrap();
    let s = class_stats(&m);
    assert_eq!((s.total, s.benign, s.malicious), (5168, 2472, 2696));
    assert!(s.out_of_band.is_empty(), "{:?}", s.out_of_band);
    assert!(s.per_class.iter().all(|c| (224..=225).contains(&c.count)));
    assert_eq!(s.per_group.iter().map(|g| g.count).sum::<usize>(), 5168);
}

#[test]
fn stratified_folds_are_balanced_and_cover_everything() {
    let m = replica_manifest(1).unwrap();
    let f = stratified_kfold(&m, 5, 9).unwrap();
    assert!(f.max_class_spread() <= 1);
    assert_eq!(f.folds.len(), m.len());
    f.check(&m).unwrap();
    let sizes: Vec<usize> = (0..5).map(|k| f.eval_indices(&m, k).len()).collect();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, "{sizes:?}");
    assert_eq!(stratified_kfold(&m, 5, 9).unwrap().to_json(), f.to_json());
    assert_ne!(stratified_kfold(&m, 5, 10).unwrap().hash(), f.hash());
}

#[test]
fn variants_follow_their_parent() {
    let m = jitter_variants(&replica_manifest(2).unwrap(), 0.1, 2).unwrap();
    assert_eq!(m.len(), 4 * m.num_originals());
    let f = stratified_kfold(&m, 5, 0).unwrap();
    for v in m.variants() {
        let p = m.get(&v.parent_id).unwrap();
        assert_eq!(f.fold_of(&v.video_id), f.fold_of(&p.video_id));
        assert_eq!(v.features.video, p.features.video);
        assert_eq!(v.class, p.class);
    }
    // Held-out originals never leak into training, directly or via a variant.
    for k in 0..5 {
        let eval: Vec<&str> = f.eval_indices(&m, k).iter().map(|&i| m.records()[i].video_id.as_str()).collect();
        for &i in &f.train_indices(&m, k, true) {
            let r = &m.records()[i];
            let root = if r.is_augmented() { &r.parent_id } else { &r.video_id };
            assert!(!eval.contains(&root.as_str()));
        }
    }
}

#[test]
fn variants_cannot_be_attached_twice_or_partially() {
    let m = small(5, true);
    assert!(matches!(jitter_variants(&m, 0.1, 0), Err(Error::Augmentation { .. })));
    let base = small(5, false);
    let full = jitter_variants(&base, 0.1, 0).unwrap();
    let mut table = VariantTable::default();
    for v in full.variants().filter(|v| v.variant_index != 3) {
        table.entries.push(VariantEntry {
            parent_id: v.parent_id.clone(),
            variant_index: v.variant_index,
            audio: v.features.audio.clone(),
            text: v.features.text.clone(),
            video: None,
        });
    }
    table.features = full.feature_store().clone();
    assert!(matches!(attach_variants(&base, &table), Err(Error::Augmentation { .. })));
}

#[test]
fn filters_keep_whole_families() {
    let m = jitter_variants(&replica_manifest(3).unwrap(), 0.1, 3).unwrap();
    for filter in [SubsetFilter::EnglishOnly, SubsetFilter::ClearAudio] {
        let sub = filter_subset(&m, filter).unwrap();
        assert!(sub.num_originals() < m.num_originals());
        assert_eq!(sub.len(), 4 * sub.num_originals());
        assert!(sub.originals().all(|r| filter.keeps(r)));
        let again = filter_subset(&sub, filter).unwrap();
        assert_eq!(again.to_jsonl(), sub.to_jsonl());
    }
    let en = filter_subset(&m, SubsetFilter::EnglishOnly).unwrap();
    assert!(en.originals().any(|r| r.language == "en-gb"));
}

#[test]
fn save_and_load_round_trip() {
    let m = small(5, true);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&m, dir.path(), "manifest.jsonl").unwrap();
    let back = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(back.to_jsonl(), m.to_jsonl());
    for (k, f) in m.feature_store() {
        assert_eq!(&back.feature_store()[k], f);
    }
}

#[test]
fn manifest_validation_rejects_bad_records() {
    let m = small(5, false);
    let mut records = m.records().to_vec();
    records[0].duration_s = 240.0;
    assert!(matches!(
        Manifest::new(records, m.feature_store().clone()),
        Err(Error::Validation { .. })
    ));

    let mut records = m.records().to_vec();
    records[1].video_id = records[0].video_id.clone();
    assert!(Manifest::new(records, m.feature_store().clone()).is_err());

    let mut records = m.records().to_vec();
    records[2].parent_id = "nobody".into();
    records[2].variant_index = 1;
    assert!(Manifest::new(records, m.feature_store().clone()).is_err());

    let mut store = m.feature_store().clone();
    let key = m.records()[0].features.text.clone();
    let width = store[&key].cols() + 1;
    store.insert(key, Arc::new(FeatureMatrix::new(Modality::Text, 1, width, vec![1.0; width]).unwrap()));
    assert!(Manifest::new(m.records().to_vec(), store).is_err());

    let mut store = m.feature_store().clone();
    let key = m.records()[3].features.audio.clone();
    let d = store[&key].cols();
    store.insert(key, Arc::new(FeatureMatrix::new(Modality::Audio, 1, d, vec![0.0; d]).unwrap()));
    assert!(Manifest::new(m.records().to_vec(), store).is_err());
}

#[test]
fn too_few_originals_for_k_is_a_stratification_error() {
    let m = small(3, false);
    assert!(matches!(stratified_kfold(&m, 5, 0), Err(Error::Stratification { .. })));
    assert!(stratified_kfold(&m, 3, 0).is_ok());
}

#[test]
fn taxonomy_collapse_matches_flags() {
    let counts = replica_counts();
    let malicious: usize = ClassId::all().filter(|c| c.info().malicious).map(|c| counts[c.index()]).sum();
    assert_eq!(malicious, 2696);
    for c in ClassId::all() {
        assert_eq!(
            binary_collapse(c.index()).unwrap() == Polarity::Malicious,
            c.info().malicious
        );
    }
    assert!(binary_collapse(23).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stratification_invariants(counts in prop::collection::vec(0usize..12, NUM_CLASSES), k in 2usize..6, seed in 0u64..1000) {
        let counts: Vec<usize> = counts.into_iter().map(|c| if c > 0 && c < k { k } else { c }).collect();
        prop_assume!(counts.iter().sum::<usize>() > 0);
        let mut records = Vec::new();
        let mut store = FeatureStore::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                let id = format!("c{c}-{i}");
                let refs = FeatureRefs {
                    video: format!("{id}.v"),
                    audio: format!("{id}.a"),
                    text: format!("{id}.t"),
                };
                for m in Modality::ALL {
                    store.insert(refs.get(m).to_string(), Arc::new(FeatureMatrix::new(m, 1, 2, vec![1.0, 0.5]).unwrap()));
                }
                records.push(VideoRecord {
                    video_id: id,
                    class: ClassId::new(c).unwrap(),
                    language: "en".into(),
                    audio_clear: true,
                    human_centric: true,
                    duration_s: 10.0,
                    parent_id: String::new(),
                    variant_index: 0,
                    features: refs,
                });
            }
        }
        let m = Manifest::new(records, store).unwrap();
        let f = stratified_kfold(&m, k, seed).unwrap();
        prop_assert!(f.max_class_spread() <= 1);
        let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
        for h in &f.histograms {
            for (c, n) in h.iter().enumerate() {
                *per_class.entry(c).or_default() += n;
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            prop_assert_eq!(per_class[&c], n);
        }
        let total: usize = (0..k).map(|fold| f.eval_indices(&m, fold).len()).sum();
        prop_assert_eq!(total, m.len());
        prop_assert_eq!(FoldAssignment::from_json(&f.to_json()).unwrap(), f);
    }
}
