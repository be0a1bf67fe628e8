use std::path::PathBuf;

use ihq::curation::*;
use ihq::data::ClassId;
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/curation").join(name)
}

fn class(name: &str) -> ClassId {
    ClassId::from_name(name).unwrap()
}

/// Independent tally: every decision names an outcome (a class or removal),
/// and an outcome backed by two or more annotators wins.
fn oracle(decisions: &[Decision; 3], provisional: ClassId) -> Verdict {
    let outcome = |d: &Decision| match d {
        Decision::Keep => Some(provisional.index()),
        Decision::Change(c) => Some(c.index()),
        Decision::Remove => None,
    };
    let outcomes: Vec<Option<usize>> = decisions.iter().map(outcome).collect();
    for o in &outcomes {
        if outcomes.iter().filter(|x| *x == o).count() >= 2 {
            return match o {
                None => Verdict::Remove,
                Some(c) if *c == provisional.index() => Verdict::Keep,
                Some(c) => Verdict::Relabel(ClassId::new(*c).unwrap()),
            };
        }
    }
    Verdict::Disagreement
}

#[test]
fn majority_matches_brute_force_enumeration() {
    let mut checked = 0;
    for provisional in [0usize, 3, 22] {
        let p = ClassId::new(provisional).unwrap();
        // Change-target sets of size 0..=3, with and without the provisional class.
        let target_sets: Vec<Vec<usize>> = vec![
            vec![],
            vec![provisional],
            vec![7],
            vec![7, 12],
            vec![provisional, 7],
            vec![7, 12, 19],
            vec![provisional, 7, 12],
        ];
        for targets in target_sets {
            let mut options = vec![Decision::Keep, Decision::Remove];
            options.extend(targets.iter().map(|&t| Decision::Change(ClassId::new(t).unwrap())));
            for a in &options {
                for b in &options {
                    for c in &options {
                        let d = [*a, *b, *c];
                        assert_eq!(majority(&d, p), oracle(&d, p), "{d:?} provisional {provisional}");
                        checked += 1;
                    }
                }
            }
        }
    }
    assert!(checked > 500);
}

#[test]
fn fixture_reproduces_hand_walk() {
    let catalog = read_catalog(&fixture("catalog.jsonl")).unwrap();
    let keywords = read_keywords(&fixture("keywords.tsv")).unwrap();
    let annotations = read_annotations(&fixture("annotations.jsonl")).unwrap();
    assert_eq!(catalog.len(), 10);

    let pool = collect_candidates(&catalog, &keywords).unwrap();
    let got: Vec<(&str, &str)> = pool
        .candidates
        .iter()
        .map(|c| (c.video_id.as_str(), c.category.name()))
        .collect();
    assert_eq!(
        got,
        [
            ("v01", "Financial fraud"),
            ("v06", "Financial fraud"),
            ("v02", "Comedy"),
            ("v07", "Comedy"),
            ("v08", "Comedy"),
            ("v05", "Comedy"),
            ("v10", "Comedy"),
        ]
    );
    assert_eq!(pool.filtered_out, ["v04"]);
    assert_eq!(pool.empty_keywords, [(class("Financial fraud"), "ponzi".to_string())]);

    let res = resolve_annotations(&pool, &annotations).unwrap();
    let kept: Vec<(&str, &str)> = res.labeled.iter().map(|l| (l.video_id.as_str(), l.class.name())).collect();
    assert_eq!(
        kept,
        [
            ("v01", "Financial fraud"),
            ("v02", "Comedy"),
            ("v05", "Comedy"),
            ("v06", "Comedy"),
        ]
    );
    let discarded: Vec<(&str, Verdict)> = res.discards.iter().map(|d| (d.video_id.as_str(), d.verdict)).collect();
    assert_eq!(
        discarded,
        [
            ("v07", Verdict::Remove),
            ("v08", Verdict::Disagreement),
            ("v10", Verdict::Disagreement),
        ]
    );

    let report = curation_report(&pool, &res);
    assert_eq!(
        report.total,
        CurationCounts {
            collected: 7,
            kept: 3,
            relabeled: 1,
            discarded: 3
        }
    );
    assert_eq!(report.filtered_non_human_centric, 1);
    assert_eq!(report.empty_keywords, 1);
}

#[test]
fn missing_annotation_names_the_video() {
    let catalog = read_catalog(&fixture("catalog.jsonl")).unwrap();
    let keywords = read_keywords(&fixture("keywords.tsv")).unwrap();
    let mut annotations = read_annotations(&fixture("annotations.jsonl")).unwrap();
    annotations.retain(|a| a.video_id != "v07");
    let pool = collect_candidates(&catalog, &keywords).unwrap();
    let err = resolve_annotations(&pool, &annotations).unwrap_err();
    assert!(err.to_string().contains("v07"), "{err}");
}

#[test]
fn duplicate_catalog_ids_are_rejected() {
    let mut catalog = read_catalog(&fixture("catalog.jsonl")).unwrap();
    catalog.push(catalog[0].clone());
    let keywords = read_keywords(&fixture("keywords.tsv")).unwrap();
    assert!(collect_candidates(&catalog, &keywords).is_err());
}

#[test]
fn matching_is_case_insensitive_and_covers_tags() {
    let entry = |id: &str, title: &str, tags: &[&str]| CatalogEntry {
        video_id: id.into(),
        title: title.into(),
        description: String::new(),
        tags: tags.iter().map(|t| t.to_string()).collect(),
        duration_s: 10.0,
        human_centric: true,
    };
    let catalog = vec![entry("a", "PoNzI explained", &[]), entry("b", "nothing", &["ponzi"])];
    let mut kw = KeywordSet::new();
    kw.add(class("Financial fraud"), "Ponzi");
    let pool = collect_candidates(&catalog, &kw).unwrap();
    assert_eq!(pool.len(), 2);
}

fn decision() -> impl Strategy<Value = Decision> {
    prop_oneof![
        Just(Decision::Keep),
        Just(Decision::Remove),
        (0usize..4).prop_map(|c| Decision::Change(ClassId::new(c).unwrap())),
    ]
}

proptest! {
    #[test]
    fn resolution_partitions_the_pool(
        decisions in prop::collection::vec(prop::array::uniform3(decision()), 1..40),
        cats in prop::collection::vec(0usize..4, 40),
        rotate in 0usize..40,
    ) {
        let pool = CandidatePool {
            candidates: decisions
                .iter()
                .enumerate()
                .map(|(i, _)| Candidate { video_id: format!("id{i:03}"), category: ClassId::new(cats[i]).unwrap() })
                .collect(),
            ..CandidatePool::default()
        };
        let mut ann: Vec<AnnotationRecord> = decisions
            .iter()
            .enumerate()
            .map(|(i, d)| AnnotationRecord { video_id: format!("id{i:03}"), decisions: *d })
            .collect();
        let a = resolve_annotations(&pool, &ann).unwrap();
        let k = rotate % ann.len();
        ann.rotate_left(k);
        let b = resolve_annotations(&pool, &ann).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.labeled.len() + a.discards.len(), pool.len());
        let report = curation_report(&pool, &a);
        for row in &report.per_category {
            prop_assert_eq!(row.counts.kept + row.counts.relabeled + row.counts.discarded, row.counts.collected);
        }
    }
}
