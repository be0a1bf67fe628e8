//! Keyword-driven candidate collection and three-annotator majority vote.
//!
//! Collection walks the categories in taxonomy order and each category's
//! keywords in file order. Every keyword contributes the first
//! [`PER_KEYWORD`] catalog matches shorter than four minutes; a video found
//! twice keeps the category that found it first. Non-human-centric videos
//! are dropped only after the union, so they still use up a slot.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::manifest::MAX_DURATION_S;
use crate::data::taxonomy::{ClassId, NUM_CLASSES};
use crate::error::{Error, Result};

pub const PER_KEYWORD: usize = 5;
pub const ANNOTATORS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogEntry {
    pub video_id: String,
    pub title: String,
    pub description: String,
    #[serde(default)]
    pub tags: Vec<String>,
    pub duration_s: f64,
    pub human_centric: bool,
}

impl CatalogEntry {
    fn haystack(&self) -> String {
        let mut s = String::with_capacity(self.title.len() + self.description.len() + 16);
        s.push_str(&self.title);
        s.push('\n');
        s.push_str(&self.description);
        for t in &self.tags {
            s.push('\n');
            s.push_str(t);
        }
        s.to_lowercase()
    }
}

/// Search terms per category, kept in taxonomy order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeywordSet {
    by_class: BTreeMap<ClassId, Vec<String>>,
}

impl KeywordSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class: ClassId, keyword: impl Into<String>) {
        self.by_class.entry(class).or_default().push(keyword.into());
    }

    /// Parses `category<TAB>keyword` lines. Blank lines and lines starting
    /// with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .has_headers(false)
            .flexible(true)
            .comment(Some(b'#'))
            .quoting(false)
            .from_reader(text.as_bytes());
        let mut set = Self::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Error::Curation(format!("keywords: {e}")))?;
            if row.iter().all(|f| f.trim().is_empty()) {
                continue;
            }
            if row.len() != 2 {
                return Err(Error::Curation(format!(
                    "keywords row {}: expected `category<TAB>keyword`, got {} fields",
                    i + 1,
                    row.len()
                )));
            }
            let class = ClassId::from_name(&row[0])?;
            let keyword = row[1].trim();
            if keyword.is_empty() {
                return Err(Error::Curation(format!("keywords row {}: empty keyword", i + 1)));
            }
            set.add(class, keyword);
        }
        let missing = set.missing_categories();
        if !missing.is_empty() {
            log::warn!("{} of {NUM_CLASSES} categories have no keywords", missing.len());
        }
        Ok(set)
    }

    pub fn keywords(&self, class: ClassId) -> &[String] {
        self.by_class.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn categories(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.by_class.keys().copied()
    }

    pub fn missing_categories(&self) -> Vec<ClassId> {
        ClassId::all().filter(|c| self.keywords(*c).is_empty()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub video_id: String,
    pub category: ClassId,
}

/// Unique candidates in discovery order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub candidates: Vec<Candidate>,
    /// Human-centric filter casualties.
    pub filtered_out: Vec<String>,
    /// `(category, keyword)` pairs that matched nothing.
    pub empty_keywords: Vec<(ClassId, String)>,
}

impl CandidatePool {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn category_of(&self, video_id: &str) -> Option<ClassId> {
        self.candidates.iter().find(|c| c.video_id == video_id).map(|c| c.category)
    }
}

pub fn collect_candidates(catalog: &[CatalogEntry], keywords: &KeywordSet) -> Result<CandidatePool> {
    let mut seen_ids = HashSet::new();
    for e in catalog {
        if !seen_ids.insert(e.video_id.as_str()) {
            return Err(Error::Curation(format!("duplicate catalog id `{}`", e.video_id)));
        }
    }
    let haystacks: Vec<String> = catalog.iter().map(CatalogEntry::haystack).collect();

    let mut pool = CandidatePool::default();
    let mut taken: HashSet<&str> = HashSet::new();
    let mut union: Vec<(&CatalogEntry, ClassId)> = Vec::new();
    for class in keywords.categories() {
        for kw in keywords.keywords(class) {
            let needle = kw.to_lowercase();
            let matches: Vec<&CatalogEntry> = catalog
                .iter()
                .zip(&haystacks)
                .filter(|(e, h)| e.duration_s < MAX_DURATION_S && h.contains(&needle))
                .map(|(e, _)| e)
                .take(PER_KEYWORD)
                .collect();
            if matches.is_empty() {
                log::info!("keyword `{kw}` ({}) matched nothing", class.name());
                pool.empty_keywords.push((class, kw.clone()));
            }
            for e in matches {
                if taken.insert(&e.video_id) {
                    union.push((e, class));
                }
            }
        }
    }
    for (e, class) in union {
        if e.human_centric {
            pool.candidates.push(Candidate {
                video_id: e.video_id.clone(),
                category: class,
            });
        } else {
            pool.filtered_out.push(e.video_id.clone());
        }
    }
    Ok(pool)
}

/// One annotator's verdict on a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Keep,
    Change(ClassId),
    Remove,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub decisions: [Decision; ANNOTATORS],
}

/// Result of the vote for a single video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Keep,
    Relabel(ClassId),
    Remove,
    Disagreement,
}

/// At least two annotators must agree on both the action and, for a change,
/// the target class. A change to the provisional category is a keep.
pub fn majority(decisions: &[Decision; ANNOTATORS], provisional: ClassId) -> Verdict {
    let norm = decisions.map(|d| match d {
        Decision::Change(c) if c == provisional => Decision::Keep,
        other => other,
    });
    for d in norm {
        if norm.iter().filter(|&&x| x == d).count() >= 2 {
            return match d {
                Decision::Keep => Verdict::Keep,
                Decision::Change(c) => Verdict::Relabel(c),
                Decision::Remove => Verdict::Remove,
            };
        }
    }
    Verdict::Disagreement
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledVideo {
    pub video_id: String,
    pub provisional: ClassId,
    pub class: ClassId,
}

impl LabeledVideo {
    pub fn relabeled(&self) -> bool {
        self.class != self.provisional
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discard {
    pub video_id: String,
    pub provisional: ClassId,
    pub verdict: Verdict,
}

/// Labelled videos and discards, both sorted by `video_id`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub labeled: Vec<LabeledVideo>,
    pub discards: Vec<Discard>,
}

pub fn resolve_annotations(pool: &CandidatePool, annotations: &[AnnotationRecord]) -> Result<Resolution> {
    let mut by_id: HashMap<&str, &AnnotationRecord> = HashMap::new();
    for a in annotations {
        if by_id.insert(&a.video_id, a).is_some() {
            return Err(Error::Curation(format!("duplicate annotation for `{}`", a.video_id)));
        }
    }
    let mut out = Resolution::default();
    for c in &pool.candidates {
        let a = by_id
            .get(c.video_id.as_str())
            .ok_or_else(|| Error::Curation(format!("no annotation record for `{}`", c.video_id)))?;
        match majority(&a.decisions, c.category) {
            Verdict::Keep => out.labeled.push(LabeledVideo {
                video_id: c.video_id.clone(),
                provisional: c.category,
                class: c.category,
            }),
            Verdict::Relabel(to) => out.labeled.push(LabeledVideo {
                video_id: c.video_id.clone(),
                provisional: c.category,
                class: to,
            }),
            verdict => out.discards.push(Discard {
                video_id: c.video_id.clone(),
                provisional: c.category,
                verdict,
            }),
        }
    }
    let pooled: HashSet<&str> = pool.candidates.iter().map(|c| c.video_id.as_str()).collect();
    let extra = annotations.iter().filter(|a| !pooled.contains(a.video_id.as_str())).count();
    if extra > 0 {
        log::warn!("{extra} annotation records do not match any candidate");
    }
    out.labeled.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    out.discards.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationCounts {
    pub collected: usize,
    /// Kept under the provisional category.
    pub kept: usize,
    pub relabeled: usize,
    pub discarded: usize,
}

impl CurationCounts {
    fn add(&mut self, o: &CurationCounts) {
        self.collected += o.collected;
        self.kept += o.kept;
        self.relabeled += o.relabeled;
        self.discarded += o.discarded;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    #[serde(flatten)]
    pub counts: CurationCounts,
}

/// Counts per provisional category. `kept + relabeled + discarded ==
/// collected` in every row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub total: CurationCounts,
    pub per_category: Vec<CategoryReport>,
    pub filtered_non_human_centric: usize,
    pub empty_keywords: usize,
}

pub fn curation_report(pool: &CandidatePool, resolution: &Resolution) -> CurationReport {
    let mut per = [CurationCounts::default(); NUM_CLASSES];
    for c in &pool.candidates {
        per[c.category.index()].collected += 1;
    }
    for l in &resolution.labeled {
        let row = &mut per[l.provisional.index()];
        if l.relabeled() {
            row.relabeled += 1;
        } else {
            row.kept += 1;
        }
    }
    for d in &resolution.discards {
        per[d.provisional.index()].discarded += 1;
    }
    let mut total = CurationCounts::default();
    per.iter().for_each(|c| total.add(c));
    CurationReport {
        total,
        per_category: ClassId::all()
            .map(|c| CategoryReport {
                category: c.name().to_string(),
                counts: per[c.index()],
            })
            .collect(),
        filtered_non_human_centric: pool.filtered_out.len(),
        empty_keywords: pool.empty_keywords.len(),
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.display().to_string(),
                detail: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

pub fn read_catalog(path: &Path) -> Result<Vec<CatalogEntry>> {
    read_jsonl(path)
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    read_jsonl(path)
}

pub fn read_keywords(path: &Path) -> Result<KeywordSet> {
    KeywordSet::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(i: usize) -> ClassId {
        ClassId::new(i).unwrap()
    }

    #[test]
    fn decisions_serialise_compactly() {
        let a = AnnotationRecord {
            video_id: "x".into(),
            decisions: [Decision::Keep, Decision::Change(c(3)), Decision::Remove],
        };
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(s, r#"{"video_id":"x","decisions":["keep",{"change":"Comedy"},"remove"]}"#);
        assert_eq!(serde_json::from_str::<AnnotationRecord>(&s).unwrap(), a);
    }

    #[test]
    fn worked_votes() {
        use Decision::*;
        let p = c(0);
        assert_eq!(majority(&[Keep, Keep, Remove], p), Verdict::Keep);
        assert_eq!(majority(&[Change(c(3)), Change(c(3)), Keep], p), Verdict::Relabel(c(3)));
        assert_eq!(majority(&[Change(c(3)), Change(c(4)), Remove], p), Verdict::Disagreement);
        assert_eq!(majority(&[Remove, Keep, Remove], p), Verdict::Remove);
        assert_eq!(majority(&[Change(p), Keep, Remove], p), Verdict::Keep);
    }

    #[test]
    fn keyword_file_parses() {
        let k = KeywordSet::parse("# header\nComedy\tstand-up\ncomedy\tsketch\n\nFinancial fraud\tget rich\n").unwrap();
        assert_eq!(k.keywords(c(3)), ["stand-up", "sketch"]);
        assert_eq!(k.keywords(c(1)), ["get rich"]);
        assert_eq!(k.categories().collect::<Vec<_>>(), [c(1), c(3)]);
        assert!(KeywordSet::parse("Comedy stand-up\n").is_err());
        assert!(KeywordSet::parse("Nope\tx\n").is_err());
    }
}
