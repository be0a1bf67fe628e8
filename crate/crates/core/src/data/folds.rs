//! Leakage-safe stratified k-fold assignment.
//!
//! Originals of each class are shuffled with a keyed stream and dealt
//! round-robin; the dealing offset carries over between classes so overall
//! fold sizes also differ by at most one. Variants inherit their parent's
//! fold.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::Manifest;
use super::taxonomy::{ClassId, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// `video_id → fold` for every record, variants included.
    pub folds: BTreeMap<String, usize>,
    /// Per fold, per class count of originals.
    pub histograms: Vec<Vec<usize>>,
}

pub fn stratified_kfold(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut by_class: Vec<Vec<&str>> = vec![Vec::new(); NUM_CLASSES];
    for r in manifest.originals() {
        by_class[r.class.index()].push(&r.video_id);
    }

    let mut folds = BTreeMap::new();
    let mut histograms = vec![vec![0usize; NUM_CLASSES]; k];
    let mut offset = 0;
    for class in ClassId::all() {
        let ids = &mut by_class[class.index()];
        if ids.is_empty() {
            continue;
        }
        if ids.len() < k {
            return Err(Error::Stratification {
                class: class.name().to_string(),
                count: ids.len(),
                k,
            });
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng::stream(seed, "folds", class.index() as u64));
        for (i, id) in ids.iter().enumerate() {
            let f = (offset + i) % k;
            folds.insert(id.to_string(), f);
            histograms[f][class.index()] += 1;
        }
        offset = (offset + ids.len()) % k;
    }
    for v in manifest.variants() {
        let f = folds[&v.parent_id];
        folds.insert(v.video_id.clone(), f);
    }

    Ok(FoldAssignment {
        k,
        seed,
        folds,
        histograms,
    })
}

impl FoldAssignment {
    pub fn fold_of(&self, video_id: &str) -> Option<usize> {
        self.folds.get(video_id).copied()
    }

    /// Record positions of the held-out originals of `fold`.
    pub fn eval_indices(&self, manifest: &Manifest, fold: usize) -> Vec<usize> {
        manifest
            .records()
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.is_augmented() && self.fold_of(&r.video_id) == Some(fold))
            .map(|(i, _)| i)
            .collect()
    }

    /// Record positions used for training when `fold` is held out.
    pub fn train_indices(&self, manifest: &Manifest, fold: usize, include_variants: bool) -> Vec<usize> {
        manifest
            .records()
            .iter()
            .enumerate()
            .filter(|(_, r)| {
                (include_variants || !r.is_augmented())
                    && self.fold_of(&r.video_id).is_some_and(|f| f != fold)
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Largest per-class difference between fold sizes.
    pub fn max_class_spread(&self) -> usize {
        (0..NUM_CLASSES)
            .map(|c| {
                let sizes = self.histograms.iter().map(|h| h[c]);
                sizes.clone().max().unwrap_or(0) - sizes.min().unwrap_or(0)
            })
            .max()
            .unwrap_or(0)
    }

    /// Checks this assignment covers `manifest` consistently.
    pub fn check(&self, manifest: &Manifest) -> Result<()> {
        for r in manifest.records() {
            let f = self
                .fold_of(&r.video_id)
                .ok_or_else(|| Error::Config(format!("record `{}` has no fold", r.video_id)))?;
            if f >= self.k {
                return Err(Error::Config(format!("record `{}` in fold {f} of {}", r.video_id, self.k)));
            }
            if r.is_augmented() && self.fold_of(&r.parent_id) != Some(f) {
                return Err(Error::Config(format!(
                    "variant `{}` is not in its parent's fold",
                    r.video_id
                )));
            }
        }
        Ok(())
    }

    /// Restricts to records present in `manifest` (e.g. after filtering).
    pub fn restrict(&self, manifest: &Manifest) -> FoldAssignment {
        let folds: BTreeMap<String, usize> = manifest
            .records()
            .iter()
            .filter_map(|r| self.fold_of(&r.video_id).map(|f| (r.video_id.clone(), f)))
            .collect();
        let mut histograms = vec![vec![0usize; NUM_CLASSES]; self.k];
        for r in manifest.originals() {
            if let Some(&f) = folds.get(&r.video_id) {
                histograms[f][r.class.index()] += 1;
            }
        }
        FoldAssignment {
            k: self.k,
            seed: self.seed,
            folds,
            histograms,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("folds serialise")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            path: "fold assignment".into(),
            detail: e.to_string(),
        })
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}
