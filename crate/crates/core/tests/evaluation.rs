use ihq::data::{binary_collapse, Polarity, NUM_CLASSES};
use ihq::evaluation::*;
use ihq::Error;
use proptest::prelude::*;

/// Per-class counting straight from the pairs, no confusion matrix.
fn oracle(preds: &[usize], labels: &[usize], classes: usize) -> (f64, f64, f64, f64) {
    let n = preds.len() as f64;
    let acc = preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / n;
    let (mut sp, mut sr, mut sf, mut k) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..classes {
        let tp = preds.iter().zip(labels).filter(|&(&p, &y)| p == c && y == c).count() as f64;
        let fp = preds.iter().zip(labels).filter(|&(&p, &y)| p == c && y != c).count() as f64;
        let fn_ = preds.iter().zip(labels).filter(|&(&p, &y)| p != c && y == c).count() as f64;
        if tp + fn_ == 0.0 {
            continue;
        }
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = tp / (tp + fn_);
        let f = if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fn_) } else { 0.0 };
        sp += p;
        sr += r;
        sf += f;
        k += 1.0;
    }
    (acc, sp / k, sr / k, sf / k)
}

#[test]
fn hand_computed_three_class_example() {
    let names = vec!["a".to_string(), "b".into(), "c".into()];
    let labels = [0, 0, 0, 1, 1, 2];
    let preds = [0, 0, 1, 1, 2, 2];
    let r = compute_metrics(&preds, &labels, &names).unwrap();
    assert_eq!(r.n, 6);
    assert!((r.accuracy - 4.0 / 6.0).abs() < 1e-12);
    // precision: a 2/2, b 1/2, c 1/2; recall: a 2/3, b 1/2, c 1/1
    assert!((r.macro_precision - (1.0 + 0.5 + 0.5) / 3.0).abs() < 1e-12);
    assert!((r.macro_recall - (2.0 / 3.0 + 0.5 + 1.0) / 3.0).abs() < 1e-12);
    let f = [0.8, 0.5, 2.0 / 3.0];
    assert!((r.macro_f1 - f.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    assert!(r.zero_support.is_empty());
}

#[test]
fn classes_without_support_are_listed_not_averaged() {
    let names = class_names(NUM_CLASSES);
    let r = compute_metrics(&[0, 1, 1], &[0, 1, 1], &names).unwrap();
    assert_eq!(r.macro_f1, 1.0);
    assert_eq!(r.zero_support.len(), NUM_CLASSES - 2);
    assert_eq!(r.per_class.len(), NUM_CLASSES);
}

#[test]
fn bad_inputs_are_evaluation_errors() {
    let names = class_names(2);
    assert!(matches!(compute_metrics(&[], &[], &names), Err(Error::Evaluation(_))));
    assert!(matches!(compute_metrics(&[0], &[0, 1], &names), Err(Error::Evaluation(_))));
    assert!(matches!(compute_metrics(&[0, 2], &[0, 1], &names), Err(Error::Label { .. })));
}

#[test]
fn confusion_csv_has_header_and_one_row_per_class() {
    let names = class_names(2);
    let m = confusion(&[0, 1, 1], &[0, 0, 1], &names).unwrap();
    assert_eq!(m.counts, vec![vec![1, 1], vec![0, 1]]);
    let csv = m.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("true\\predicted,"));
    assert!(lines[1].ends_with(",1,1"));
    let mut sum = m.clone();
    sum.add(&m).unwrap();
    assert_eq!(sum.total(), 6);
    assert!(sum.add(&ConfusionMatrix::zeros(class_names(NUM_CLASSES))).is_err());
}

#[test]
fn collapse_matches_the_taxonomy() {
    let all: Vec<usize> = (0..NUM_CLASSES).collect();
    let collapsed = collapse_labels(&all).unwrap();
    for (c, b) in all.into_iter().zip(collapsed) {
        assert_eq!(b, binary_collapse(c).unwrap().index());
    }
    assert_eq!(Polarity::Benign.index(), 0);
    assert!(collapse_labels(&[NUM_CLASSES]).is_err());
}

proptest! {
    #[test]
    fn metrics_agree_with_the_counting_oracle(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..80)
    ) {
        let names: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let r = compute_metrics(&preds, &labels, &names).unwrap();
        let (acc, p, rec, f) = oracle(&preds, &labels, 5);
        prop_assert!((r.accuracy - acc).abs() < 1e-12);
        prop_assert!((r.macro_precision - p).abs() < 1e-12);
        prop_assert!((r.macro_recall - rec).abs() < 1e-12);
        prop_assert!((r.macro_f1 - f).abs() < 1e-12);
        for v in [r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let m = confusion(&preds, &labels, &names).unwrap();
        prop_assert_eq!(m.total() as usize, preds.len());
        let support: usize = r.per_class.iter().map(|c| c.support).sum();
        prop_assert_eq!(support, preds.len());
    }

    #[test]
    fn metrics_ignore_sample_order(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40),
        rot in 0usize..40,
    ) {
        let names: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
        let mut shifted = pairs.clone();
        shifted.rotate_left(rot % pairs.len());
        let (p1, l1): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let (p2, l2): (Vec<usize>, Vec<usize>) = shifted.into_iter().unzip();
        prop_assert_eq!(compute_metrics(&p1, &l1, &names).unwrap(), compute_metrics(&p2, &l2, &names).unwrap());
    }
}
