//! Per-video metadata, feature ingestion and augmentation lineage.
//!
//! A manifest is JSONL, one record per line, with exactly these fields:
//! `video_id, class, language, audio_clear, human_centric, duration_s,
//! parent_id, variant_index, features:{video, audio, text}`. Feature paths
//! are relative to the manifest's directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::features::{read_feature_file, write_feature_file, FeatureMatrix, Modality};
use super::taxonomy::{ClassId, Group, Polarity, NUM_CLASSES, NUM_GROUPS};
use crate::error::{Error, Result, ValidationKind};

/// Videos must be strictly shorter than four minutes.
pub const MAX_DURATION_S: f64 = 240.0;
pub const VARIANTS_PER_ORIGINAL: usize = 3;

/// Feature matrices keyed by the relative path used in the manifest.
pub type FeatureStore = BTreeMap<String, Arc<FeatureMatrix>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRefs {
    pub video: String,
    pub audio: String,
    pub text: String,
}

impl FeatureRefs {
    pub fn get(&self, m: Modality) -> &str {
        match m {
            Modality::Video => &self.video,
            Modality::Audio => &self.audio,
            Modality::Text => &self.text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub class: ClassId,
    pub language: String,
    pub audio_clear: bool,
    pub human_centric: bool,
    pub duration_s: f64,
    /// Empty for originals.
    pub parent_id: String,
    /// 0 for originals, 1–3 for augmented variants.
    pub variant_index: u8,
    pub features: FeatureRefs,
}

impl VideoRecord {
    pub fn is_augmented(&self) -> bool {
        self.variant_index > 0
    }

    /// Primary language subtag, e.g. `en` for `en-gb`.
    pub fn primary_language(&self) -> &str {
        self.language.split(['-', '_']).next().unwrap_or("")
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    video_id: String,
    class: String,
    language: String,
    audio_clear: bool,
    human_centric: bool,
    duration_s: f64,
    #[serde(default)]
    parent_id: Option<String>,
    variant_index: u8,
    features: FeatureRefs,
}

impl RawRecord {
    fn into_record(self) -> Result<VideoRecord> {
        let class = ClassId::from_name(&self.class)
            .map_err(|_| Error::validation(&self.video_id, ValidationKind::UnknownClass(self.class.clone())))?;
        Ok(VideoRecord {
            video_id: self.video_id,
            class,
            language: self.language.to_lowercase(),
            audio_clear: self.audio_clear,
            human_centric: self.human_centric,
            duration_s: self.duration_s,
            parent_id: self.parent_id.unwrap_or_default(),
            variant_index: self.variant_index,
            features: self.features,
        })
    }
}

/// Parses JSONL text into records without touching feature files.
pub fn parse_records(text: &str) -> Result<Vec<VideoRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let raw: RawRecord = serde_json::from_str(line)
                .map_err(|e| Error::validation(format!("line {}", i + 1), ValidationKind::Parse(e.to_string())))?;
            raw.into_record()
        })
        .collect()
}

/// Validated, immutable set of records plus their loaded features.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    records: Vec<VideoRecord>,
    features: FeatureStore,
    index: HashMap<String, usize>,
    dims: Option<[usize; 3]>,
}

impl Manifest {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Checks every record invariant eagerly.
    pub fn new(records: Vec<VideoRecord>, features: FeatureStore) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.video_id.clone(), i).is_some() {
                return Err(Error::validation(&r.video_id, ValidationKind::DuplicateId));
            }
        }

        let mut seen_variants = HashSet::new();
        for r in &records {
            if !(r.duration_s.is_finite() && r.duration_s >= 0.0 && r.duration_s < MAX_DURATION_S) {
                return Err(Error::validation(&r.video_id, ValidationKind::DurationTooLong(r.duration_s)));
            }
            match r.variant_index {
                0 if !r.parent_id.is_empty() => {
                    return Err(Error::validation(
                        &r.video_id,
                        ValidationKind::BadVariant("original with a parent_id".into()),
                    ))
                }
                0 => {}
                1..=3 => {
                    let parent = index
                        .get(&r.parent_id)
                        .map(|&i| &records[i])
                        .filter(|p| !p.is_augmented())
                        .ok_or_else(|| {
                            Error::validation(&r.video_id, ValidationKind::OrphanVariant(r.parent_id.clone()))
                        })?;
                    if parent.class != r.class {
                        return Err(Error::validation(
                            &r.video_id,
                            ValidationKind::BadVariant(format!("class differs from parent `{}`", parent.video_id)),
                        ));
                    }
                    if parent.features.video != r.features.video {
                        return Err(Error::validation(
                            &r.video_id,
                            ValidationKind::BadVariant("video features differ from the parent's".into()),
                        ));
                    }
                    if !seen_variants.insert((r.parent_id.clone(), r.variant_index)) {
                        return Err(Error::validation(
                            &r.video_id,
                            ValidationKind::BadVariant(format!("duplicate variant_index {}", r.variant_index)),
                        ));
                    }
                }
                k => {
                    return Err(Error::validation(
                        &r.video_id,
                        ValidationKind::BadVariant(format!("variant_index {k} outside 0..=3")),
                    ))
                }
            }
        }

        let mut dims: Option<[usize; 3]> = None;
        for r in &records {
            let mut these = [0; 3];
            for m in Modality::ALL {
                let key = r.features.get(m);
                let f = features
                    .get(key)
                    .ok_or_else(|| Error::validation(&r.video_id, ValidationKind::MissingFeature(key.into())))?;
                if let Some(row) = f.zero_norm_row() {
                    return Err(Error::validation(
                        &r.video_id,
                        ValidationKind::ZeroNormRow { modality: m.tag(), row },
                    ));
                }
                these[m.index()] = f.cols();
            }
            match dims {
                None => dims = Some(these),
                Some(d) => {
                    if let Some(m) = Modality::ALL.into_iter().find(|m| d[m.index()] != these[m.index()]) {
                        return Err(Error::validation(
                            &r.video_id,
                            ValidationKind::DimensionMismatch {
                                modality: m.tag(),
                                expected: d[m.index()],
                                found: these[m.index()],
                            },
                        ));
                    }
                }
            }
        }

        Ok(Self {
            records,
            features,
            index,
            dims,
        })
    }

    pub fn records(&self) -> &[VideoRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn originals(&self) -> impl Iterator<Item = &VideoRecord> {
        self.records.iter().filter(|r| !r.is_augmented())
    }

    pub fn num_originals(&self) -> usize {
        self.originals().count()
    }

    pub fn variants(&self) -> impl Iterator<Item = &VideoRecord> {
        self.records.iter().filter(|r| r.is_augmented())
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoRecord> {
        self.index.get(video_id).map(|&i| &self.records[i])
    }

    pub fn position(&self, video_id: &str) -> Option<usize> {
        self.index.get(video_id).copied()
    }

    /// Per-modality feature dimension `[video, audio, text]`.
    pub fn dims(&self) -> Option<[usize; 3]> {
        self.dims
    }

    pub fn feature_store(&self) -> &FeatureStore {
        &self.features
    }

    pub fn features(&self, record: &VideoRecord, m: Modality) -> &FeatureMatrix {
        &self.features[record.features.get(m)]
    }

    /// Canonical JSONL serialisation.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    /// Keeps records matching `keep`; variants go whenever their parent does.
    pub fn filter_with(&self, keep: impl Fn(&VideoRecord) -> bool) -> Result<Manifest> {
        let kept_originals: HashSet<&str> = self
            .originals()
            .filter(|r| keep(r))
            .map(|r| r.video_id.as_str())
            .collect();
        let records: Vec<VideoRecord> = self
            .records
            .iter()
            .filter(|r| {
                if r.is_augmented() {
                    kept_originals.contains(r.parent_id.as_str()) && keep(r)
                } else {
                    kept_originals.contains(r.video_id.as_str())
                }
            })
            .cloned()
            .collect();
        if records.is_empty() && !self.records.is_empty() {
            log::warn!("filter removed every record");
        }
        let features = used_features(&records, &self.features);
        Manifest::new(records, features)
    }
}

fn used_features(records: &[VideoRecord], store: &FeatureStore) -> FeatureStore {
    records
        .iter()
        .flat_map(|r| Modality::ALL.map(|m| r.features.get(m).to_string()))
        .filter_map(|k| store.get(&k).map(|f| (k, Arc::clone(f))))
        .collect()
}

/// Reads a manifest and every feature file it references.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = parse_records(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut store = FeatureStore::new();
    for r in &records {
        for m in Modality::ALL {
            let key = r.features.get(m);
            if store.contains_key(key) {
                continue;
            }
            let file = base.join(key);
            if key.is_empty() || !file.is_file() {
                return Err(Error::validation(&r.video_id, ValidationKind::MissingFeature(file)));
            }
            store.insert(key.to_string(), Arc::new(read_feature_file(&file, m)?));
        }
    }
    Manifest::new(records, store)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, manifest.to_jsonl()).map_err(|e| Error::io(path, e))
}

/// Writes the manifest to `dir/manifest_name` and every feature file next
/// to it under its relative key.
pub fn save_dataset(manifest: &Manifest, dir: &Path, manifest_name: &str) -> Result<()> {
    for (key, f) in manifest.feature_store() {
        write_feature_file(&dir.join(key), f)?;
    }
    write_manifest(manifest, &dir.join(manifest_name))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCount {
    pub group: Group,
    pub name: String,
    pub count: usize,
}

/// Counts over originals only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub total: usize,
    pub variants: usize,
    pub benign: usize,
    pub malicious: usize,
    pub hours: f64,
    pub per_class: Vec<ClassCount>,
    pub per_group: Vec<GroupCount>,
    /// Classes whose count falls outside the 220–230 band of the full dataset.
    pub out_of_band: Vec<String>,
}

pub const CLASS_BAND: (usize, usize) = (220, 230);

pub fn class_stats(manifest: &Manifest) -> ClassStats {
    let mut per_class = [0usize; NUM_CLASSES];
    let mut per_group = [0usize; NUM_GROUPS];
    let (mut benign, mut malicious, mut seconds) = (0, 0, 0.0);
    for r in manifest.originals() {
        per_class[r.class.index()] += 1;
        per_group[r.class.group() as usize] += 1;
        match r.class.polarity() {
            Polarity::Benign => benign += 1,
            Polarity::Malicious => malicious += 1,
        }
        seconds += r.duration_s;
    }
    let out_of_band = if manifest.is_empty() {
        Vec::new()
    } else {
        ClassId::all()
            .filter(|c| !(CLASS_BAND.0..=CLASS_BAND.1).contains(&per_class[c.index()]))
            .map(|c| c.name().to_string())
            .collect()
    };
    ClassStats {
        total: benign + malicious,
        variants: manifest.variants().count(),
        benign,
        malicious,
        hours: seconds / 3600.0,
        per_class: ClassId::all()
            .map(|c| ClassCount {
                class: c.name().to_string(),
                count: per_class[c.index()],
            })
            .collect(),
        per_group: Group::ALL
            .iter()
            .map(|&g| GroupCount {
                group: g,
                name: g.name().to_string(),
                count: per_group[g as usize],
            })
            .collect(),
        out_of_band,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetFilter {
    EnglishOnly,
    ClearAudio,
}

impl SubsetFilter {
    pub fn keeps(self, r: &VideoRecord) -> bool {
        match self {
            SubsetFilter::EnglishOnly => r.primary_language() == "en",
            SubsetFilter::ClearAudio => r.audio_clear,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SubsetFilter::EnglishOnly => "english_only",
            SubsetFilter::ClearAudio => "clear_audio",
        }
    }
}

impl std::str::FromStr for SubsetFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "english_only" => Ok(SubsetFilter::EnglishOnly),
            "clear_audio" => Ok(SubsetFilter::ClearAudio),
            other => Err(Error::Config(format!("unknown filter `{other}`"))),
        }
    }
}

pub fn filter_subset(manifest: &Manifest, filter: SubsetFilter) -> Result<Manifest> {
    manifest.filter_with(|r| filter.keeps(r))
}

/// One paraphrase/pseudo-audio variant of an original. The video stream is
/// always the parent's; `video` may only repeat the parent's reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantEntry {
    pub parent_id: String,
    pub variant_index: u8,
    pub audio: String,
    pub text: String,
    #[serde(default)]
    pub video: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct VariantTable {
    pub entries: Vec<VariantEntry>,
    pub features: FeatureStore,
}

pub fn variant_id(parent: &str, index: u8) -> String {
    format!("{parent}~v{index}")
}

/// Adds exactly three variants to every original.
pub fn attach_variants(manifest: &Manifest, table: &VariantTable) -> Result<Manifest> {
    if let Some(v) = manifest.variants().next() {
        return Err(Error::Augmentation {
            record: v.video_id.clone(),
            detail: "manifest already contains variants".into(),
        });
    }
    let mut by_parent: BTreeMap<&str, Vec<&VariantEntry>> = BTreeMap::new();
    for e in &table.entries {
        match manifest.get(&e.parent_id) {
            Some(_) => by_parent.entry(e.parent_id.as_str()).or_default().push(e),
            None => {
                return Err(Error::Augmentation {
                    record: e.parent_id.clone(),
                    detail: "variant parent not found".into(),
                })
            }
        }
    }

    let mut records = Vec::with_capacity(manifest.len() * (1 + VARIANTS_PER_ORIGINAL));
    for orig in manifest.records() {
        records.push(orig.clone());
        let mut entries = by_parent.remove(orig.video_id.as_str()).unwrap_or_default();
        entries.sort_by_key(|e| e.variant_index);
        let indices: Vec<u8> = entries.iter().map(|e| e.variant_index).collect();
        if indices != [1, 2, 3] {
            return Err(Error::Augmentation {
                record: orig.video_id.clone(),
                detail: format!("expected variants 1, 2, 3; got {indices:?}"),
            });
        }
        for e in entries {
            if let Some(video) = &e.video {
                if *video != orig.features.video {
                    return Err(Error::Augmentation {
                        record: variant_id(&orig.video_id, e.variant_index),
                        detail: "variant supplies its own video features".into(),
                    });
                }
            }
            records.push(VideoRecord {
                video_id: variant_id(&orig.video_id, e.variant_index),
                parent_id: orig.video_id.clone(),
                variant_index: e.variant_index,
                features: FeatureRefs {
                    video: orig.features.video.clone(),
                    audio: e.audio.clone(),
                    text: e.text.clone(),
                },
                ..orig.clone()
            });
        }
    }

    let mut features = manifest.feature_store().clone();
    for (k, f) in &table.features {
        features.entry(k.clone()).or_insert_with(|| Arc::clone(f));
    }
    let features = used_features(&records, &features);
    Manifest::new(records, features)
}
