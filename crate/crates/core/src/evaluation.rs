//! Metrics, confusion matrices and the cross-validation harness.
//!
//! Precision, recall and F1 are macro averages over classes that have at
//! least one true example; classes without support are listed in
//! [`MetricsReport::zero_support`] instead of dragging the mean down.

use serde::{Deserialize, Serialize};

use crate::contrastive::ContrastiveModel;
use crate::data::{filter_subset, stratified_kfold, ClassId, FoldAssignment, Manifest, Polarity, SubsetFilter};
use crate::error::{Error, Result};
use crate::fusion::{finetune_classifier, train_supervised, Arch, FoldRun, Modalities, Prediction, TrainConfig};

/// Display names for a label space of `classes` entries (23 or 2).
pub fn class_names(classes: usize) -> Vec<String> {
    if classes == 2 {
        [Polarity::Benign, Polarity::Malicious].map(|p| p.name().to_string()).to_vec()
    } else {
        ClassId::all().take(classes).map(|c| c.name().to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub zero_support: Vec<String>,
}

/// Counts with rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(names: Vec<String>) -> Self {
        let c = names.len();
        Self {
            names,
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Evaluation("confusion matrices have different label spaces".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    /// CSV with a header row and a leading column of class names.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).expect("in-memory csv");
        for (name, row) in self.names.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }
}

fn check_inputs(preds: &[usize], labels: &[usize], classes: usize) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Evaluation("nothing to evaluate".into()));
    }
    if let Some((index, &label)) = labels.iter().chain(preds).enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::Label {
            index: index % labels.len(),
            label,
            classes,
        });
    }
    Ok(())
}

pub fn confusion(preds: &[usize], labels: &[usize], names: &[String]) -> Result<ConfusionMatrix> {
    check_inputs(preds, labels, names.len())?;
    let mut m = ConfusionMatrix::zeros(names.to_vec());
    for (&p, &y) in preds.iter().zip(labels) {
        m.counts[y][p] += 1;
    }
    Ok(m)
}

pub fn metrics_from_confusion(m: &ConfusionMatrix) -> Result<MetricsReport> {
    let c = m.names.len();
    let n = m.total();
    if n == 0 {
        return Err(Error::Evaluation("nothing to evaluate".into()));
    }
    let mut per_class = Vec::with_capacity(c);
    let mut zero_support = Vec::new();
    let (mut sp, mut sr, mut sf, mut k) = (0.0, 0.0, 0.0, 0usize);
    for i in 0..c {
        let tp = m.counts[i][i] as f64;
        let support: u64 = m.counts[i].iter().sum();
        let predicted: u64 = m.counts.iter().map(|row| row[i]).sum();
        let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if support == 0 {
            zero_support.push(m.names[i].clone());
        } else {
            sp += precision;
            sr += recall;
            sf += f1;
            k += 1;
        }
        per_class.push(ClassMetrics {
            class: m.names[i].clone(),
            precision,
            recall,
            f1,
            support: support as usize,
        });
    }
    let k = k as f64;
    Ok(MetricsReport {
        n: n as usize,
        accuracy: m.trace() as f64 / n as f64,
        macro_precision: sp / k,
        macro_recall: sr / k,
        macro_f1: sf / k,
        per_class,
        zero_support,
    })
}

pub fn compute_metrics(preds: &[usize], labels: &[usize], names: &[String]) -> Result<MetricsReport> {
    metrics_from_confusion(&confusion(preds, labels, names)?)
}

/// Maps 23-class indices to benign (0) / malicious (1).
pub fn collapse_labels(labels: &[usize]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| crate::data::binary_collapse(l).map(Polarity::index))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub metrics: MetricsReport,
}

/// Per-fold metrics of held-out originals and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub arch: Arch,
    pub modalities: Modalities,
    pub binary: bool,
    pub folds_hash: String,
    pub originals: usize,
    pub records: usize,
    pub mean: MeanMetrics,
    pub folds: Vec<FoldSummary>,
    pub confusion: ConfusionMatrix,
}

/// A cross-validation report together with the trained fold models.
pub struct CvRun {
    pub report: CvReport,
    pub runs: Vec<FoldRun>,
}

impl CvRun {
    pub fn predictions(&self) -> Vec<Prediction> {
        let mut all: Vec<Prediction> = self.runs.iter().flat_map(|r| r.predictions.clone()).collect();
        all.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        all
    }
}

pub fn summarise(
    runs: &[FoldRun],
    manifest: &Manifest,
    folds: &FoldAssignment,
    config: &TrainConfig,
) -> Result<CvReport> {
    let classes = if config.binary { 2 } else { crate::data::NUM_CLASSES };
    let names = class_names(classes);
    let mut total = ConfusionMatrix::zeros(names.clone());
    let mut summaries = Vec::with_capacity(runs.len());
    for r in runs {
        let preds: Vec<usize> = r.predictions.iter().map(|p| p.prediction).collect();
        let labels: Vec<usize> = r.predictions.iter().map(|p| p.label).collect();
        let cm = confusion(&preds, &labels, &names)?;
        total.add(&cm)?;
        summaries.push(FoldSummary {
            fold: r.fold,
            best_epoch: r.best_epoch,
            best_val_loss: r.best_val_loss,
            metrics: metrics_from_confusion(&cm)?,
        });
    }
    let k = summaries.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| summaries.iter().map(|s| f(&s.metrics)).sum::<f64>() / k;
    Ok(CvReport {
        arch: config.arch,
        modalities: config.modalities,
        binary: config.binary,
        folds_hash: folds.hash(),
        originals: manifest.num_originals(),
        records: manifest.len(),
        mean: MeanMetrics {
            accuracy: mean(|m| m.accuracy),
            macro_precision: mean(|m| m.macro_precision),
            macro_recall: mean(|m| m.macro_recall),
            macro_f1: mean(|m| m.macro_f1),
        },
        folds: summaries,
        confusion: total,
    })
}

/// Trains and evaluates every fold. `pretrained` is required for
/// [`Arch::Finetune`] and ignored otherwise.
pub fn cross_validate(
    manifest: &Manifest,
    folds: &FoldAssignment,
    config: &TrainConfig,
    pretrained: Option<&ContrastiveModel>,
) -> Result<CvRun> {
    let runs = match config.arch {
        Arch::Finetune => finetune_classifier(pretrained, manifest, folds, config)?,
        _ => train_supervised(manifest, folds, config)?,
    };
    let report = summarise(&runs, manifest, folds, config)?;
    Ok(CvRun { report, runs })
}

/// One cross-validation per modality subset, all on the same folds.
pub fn ablate_modalities(
    manifest: &Manifest,
    folds: &FoldAssignment,
    config: &TrainConfig,
    pretrained: Option<&ContrastiveModel>,
) -> Result<Vec<CvReport>> {
    Modalities::SUBSETS
        .iter()
        .map(|&m| {
            let arm = TrainConfig {
                modalities: m,
                ..config.clone()
            };
            log::info!("ablation arm {m}");
            cross_validate(manifest, folds, &arm, pretrained).map(|r| r.report)
        })
        .collect()
}

/// Cross-validation with the benign/malicious head.
pub fn binary_eval(
    manifest: &Manifest,
    folds: &FoldAssignment,
    config: &TrainConfig,
    pretrained: Option<&ContrastiveModel>,
) -> Result<CvRun> {
    let binary = TrainConfig {
        binary: true,
        ..config.clone()
    };
    cross_validate(manifest, folds, &binary, pretrained)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub filter: SubsetFilter,
    pub originals: usize,
    pub records: usize,
    pub report: CvReport,
}

/// Filters the manifest, re-stratifies the survivors and cross-validates.
pub fn filter_experiment(
    manifest: &Manifest,
    filter: SubsetFilter,
    k: usize,
    config: &TrainConfig,
    pretrained: Option<&ContrastiveModel>,
) -> Result<FilterReport> {
    let subset = filter_subset(manifest, filter)?;
    if subset.num_originals() == 0 {
        return Err(Error::Evaluation(format!("filter {} left no originals", filter.name())));
    }
    let folds = stratified_kfold(&subset, k, config.seed)?;
    let run = cross_validate(&subset, &folds, config, pretrained)?;
    Ok(FilterReport {
        filter,
        originals: subset.num_originals(),
        records: subset.len(),
        report: run.report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn hand_tally() {
        // true:  0 0 0 1 1 1
        // pred:  0 0 1 1 1 0
        let m = compute_metrics(&[0, 0, 1, 1, 1, 0], &[0, 0, 0, 1, 1, 1], &names(2)).unwrap();
        assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-12);
        assert!((m.per_class[0].precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.per_class[0].recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_support_is_excluded() {
        let m = compute_metrics(&[0, 1], &[0, 1], &names(3)).unwrap();
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.zero_support, ["c2"]);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(compute_metrics(&[0], &[0, 1], &names(2)), Err(Error::Evaluation(_))));
        assert!(compute_metrics(&[], &[], &names(2)).is_err());
        assert!(compute_metrics(&[5], &[0], &names(2)).is_err());
    }

    #[test]
    fn csv_has_named_header() {
        let cm = confusion(&[0, 1, 1], &[0, 1, 0], &names(2)).unwrap();
        assert_eq!(cm.to_csv(), "true\\predicted,c0,c1\nc0,1,1\nc1,0,1\n");
    }
}
