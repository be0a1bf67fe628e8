//! Seeded synthetic manifests for tests, demos and the acceptance suite.
//!
//! Every video draws a latent vector `z = center[class] + noise · ε`. Each
//! modality observes `W_m · z` through its own fixed random map, plus a
//! per-video private component (`nuisance`) shared by all of that video's
//! tokens and independent per-token noise. A modality without label signal
//! observes a fresh class-independent latent instead of `z`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::manifest::{attach_variants, FeatureRefs, FeatureStore, VariantEntry, VariantTable, VideoRecord};
use crate::data::{ClassId, FeatureMatrix, Manifest, Modality, NUM_CLASSES};
use crate::error::Result;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    /// Every modality observes the class-bearing latent.
    All,
    /// Only video does; audio and text see class-independent latents.
    VideoOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub dims: [usize; 3],
    pub tokens: usize,
    pub latent: usize,
    /// Scale of the class centers; 0 puts every class at the origin.
    pub separation: f64,
    /// Within-class latent noise.
    pub noise: f64,
    pub nuisance: f64,
    pub token_noise: f64,
    pub signal: Signal,
    /// Attach three variants (fresh audio and text draws) per original.
    pub variants: bool,
    /// Permute labels across originals after generation.
    pub shuffle_labels: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            per_class: 10,
            dims: [24, 20, 16],
            tokens: 3,
            latent: 16,
            separation: 3.0,
            noise: 0.3,
            nuisance: 0.1,
            token_noise: 0.1,
            signal: Signal::All,
            variants: false,
            shuffle_labels: false,
            seed: 0,
        }
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>()
}

/// Fixed random observation maps `[dim × latent]`, one per modality.
struct Observer {
    maps: [Vec<f64>; 3],
    dims: [usize; 3],
    latent: usize,
}

impl Observer {
    fn new(spec: &SyntheticSpec) -> Self {
        let maps = Modality::ALL.map(|m| {
            let mut rng = rng::stream(spec.seed, "synthetic-map", m.index() as u64);
            gaussian(&mut rng, spec.dims[m.index()] * spec.latent, 1.0 / (spec.latent as f64).sqrt())
        });
        Self {
            maps,
            dims: spec.dims,
            latent: spec.latent,
        }
    }

    fn observe<R: Rng + ?Sized>(&self, m: Modality, z: &[f64], spec: &SyntheticSpec, rng: &mut R) -> FeatureMatrix {
        let d = self.dims[m.index()];
        let w = &self.maps[m.index()];
        let private = gaussian(rng, d, spec.nuisance);
        let mut data = Vec::with_capacity(spec.tokens * d);
        for _ in 0..spec.tokens {
            for i in 0..d {
                let mut v: f64 = (0..self.latent).map(|j| w[i * self.latent + j] * z[j]).sum();
                v += private[i];
                v += spec.token_noise * Distribution::<f64>::sample(&StandardNormal, rng);
                data.push(v as f32);
            }
        }
        FeatureMatrix::new(m, spec.tokens, d, data).expect("synthetic shape")
    }
}

fn feature_key(id: &str, m: Modality) -> String {
    format!("features/{id}.{}.ihqf", m.tag())
}

/// Manifest of `per_class` originals for each of the 23 classes, ids
/// `syn00000…` in class-major order.
pub fn clustered_manifest(spec: &SyntheticSpec) -> Result<Manifest> {
    let observer = Observer::new(spec);
    let mut center_rng = rng::stream(spec.seed, "synthetic-centers", 0);
    let centers: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|_| gaussian(&mut center_rng, spec.latent, spec.separation))
        .collect();
    let spread = (spec.separation * spec.separation + spec.noise * spec.noise).sqrt();

    let n = NUM_CLASSES * spec.per_class;
    let mut labels: Vec<usize> = (0..n).map(|i| i / spec.per_class).collect();
    let mut sample_rng = rng::stream(spec.seed, "synthetic-samples", 0);
    let mut records = Vec::with_capacity(n);
    let mut features = FeatureStore::new();
    let mut latents = Vec::with_capacity(n);
    for (i, &c) in labels.iter().enumerate() {
        let id = format!("syn{i:05}");
        let noise = gaussian(&mut sample_rng, spec.latent, spec.noise);
        let z: Vec<f64> = centers[c].iter().zip(&noise).map(|(a, b)| a + b).collect();
        for m in Modality::ALL {
            let own = match (spec.signal, m) {
                (Signal::All, _) | (Signal::VideoOnly, Modality::Video) => z.clone(),
                _ => gaussian(&mut sample_rng, spec.latent, spread),
            };
            let f = observer.observe(m, &own, spec, &mut sample_rng);
            features.insert(feature_key(&id, m), Arc::new(f));
        }
        latents.push(z);
        records.push(VideoRecord {
            video_id: id.clone(),
            class: ClassId::new(c)?,
            language: "en".into(),
            audio_clear: true,
            human_centric: true,
            duration_s: 30.0 + (i % 150) as f64,
            parent_id: String::new(),
            variant_index: 0,
            features: FeatureRefs {
                video: feature_key(&id, Modality::Video),
                audio: feature_key(&id, Modality::Audio),
                text: feature_key(&id, Modality::Text),
            },
        });
    }

    if spec.shuffle_labels {
        labels.shuffle(&mut rng::stream(spec.seed, "synthetic-shuffle", 0));
        for (r, &c) in records.iter_mut().zip(&labels) {
            r.class = ClassId::new(c)?;
        }
    }
    let manifest = Manifest::new(records, features)?;
    if !spec.variants {
        return Ok(manifest);
    }

    let mut table = VariantTable::default();
    let mut variant_rng = rng::stream(spec.seed, "synthetic-variants", 0);
    for (r, z) in manifest.records().iter().zip(&latents) {
        for k in 1..=3u8 {
            let vid = crate::data::manifest::variant_id(&r.video_id, k);
            let mut refs = [String::new(), String::new()];
            for (slot, m) in [Modality::Audio, Modality::Text].into_iter().enumerate() {
                let own = match spec.signal {
                    Signal::All => z.clone(),
                    Signal::VideoOnly => gaussian(&mut variant_rng, spec.latent, spread),
                };
                let key = feature_key(&vid, m);
                table
                    .features
                    .insert(key.clone(), Arc::new(observer.observe(m, &own, spec, &mut variant_rng)));
                refs[slot] = key;
            }
            let [audio, text] = refs;
            table.entries.push(VariantEntry {
                parent_id: r.video_id.clone(),
                variant_index: k,
                audio,
                text,
                video: None,
            });
        }
    }
    attach_variants(&manifest, &table)
}

/// Pooled aligned triplets `[n × dim]` per modality sharing one latent per
/// sample, for retrieval experiments.
pub fn aligned_triplets(n: usize, latent: usize, dims: [usize; 3], noise: f64, seed: u64) -> [crate::numerics::Tensor<f32>; 3] {
    let spec = SyntheticSpec {
        dims,
        latent,
        tokens: 1,
        nuisance: noise,
        token_noise: 0.0,
        seed,
        ..SyntheticSpec::default()
    };
    let observer = Observer::new(&spec);
    let mut rng = rng::stream(seed, "triplets", 0);
    let mut cols: [Vec<f32>; 3] = Default::default();
    for _ in 0..n {
        let z = gaussian(&mut rng, latent, 1.0);
        for m in Modality::ALL {
            cols[m.index()].extend_from_slice(observer.observe(m, &z, &spec, &mut rng).data());
        }
    }
    Modality::ALL.map(|m| {
        crate::numerics::Tensor::matrix(n, dims[m.index()], std::mem::take(&mut cols[m.index()])).expect("triplet shape")
    })
}

/// Attaches three variants to every original of `manifest`: the parent's
/// audio and text features plus independent Gaussian jitter of relative
/// size `scale`, with the parent's video reference.
pub fn jitter_variants(manifest: &Manifest, scale: f64, seed: u64) -> Result<Manifest> {
    let mut rng = rng::stream(seed, "jitter-variants", 0);
    let mut table = VariantTable::default();
    for r in manifest.originals() {
        for k in 1..=3u8 {
            let vid = crate::data::manifest::variant_id(&r.video_id, k);
            let mut keys = [String::new(), String::new()];
            for (slot, m) in [Modality::Audio, Modality::Text].into_iter().enumerate() {
                let parent = manifest.features(r, m);
                let rms = (parent.data().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>()
                    / parent.data().len().max(1) as f64)
                    .sqrt();
                let data = parent
                    .data()
                    .iter()
                    .map(|&v| (f64::from(v) + scale * rms * Distribution::<f64>::sample(&StandardNormal, &mut rng)) as f32)
                    .collect();
                let key = feature_key(&vid, m);
                table
                    .features
                    .insert(key.clone(), Arc::new(FeatureMatrix::new(m, parent.rows(), parent.cols(), data)?));
                keys[slot] = key;
            }
            let [audio, text] = keys;
            table.entries.push(VariantEntry {
                parent_id: r.video_id.clone(),
                variant_index: k,
                audio,
                text,
                video: None,
            });
        }
    }
    attach_variants(manifest, &table)
}

/// Per-class original counts matching the published totals: benign
/// classes 8 × 225 + 3 × 224 = 2472, malicious 8 × 225 + 4 × 224 = 2696.
pub fn replica_counts() -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    let (mut benign_seen, mut malicious_seen) = (0, 0);
    for c in ClassId::all() {
        let seen = if c.info().malicious {
            &mut malicious_seen
        } else {
            &mut benign_seen
        };
        counts[c.index()] = if *seen < 8 { 225 } else { 224 };
        *seen += 1;
    }
    counts
}

/// Manifest with [`replica_counts`] originals, tiny features and mixed
/// languages and audio quality.
pub fn replica_manifest(seed: u64) -> Result<Manifest> {
    const LANGS: [&str; 6] = ["en", "en", "en", "es", "hi", "en-gb"];
    let mut rng = rng::stream(seed, "replica", 0);
    let mut records = Vec::new();
    let mut features = FeatureStore::new();
    let mut i = 0usize;
    for (c, &count) in replica_counts().iter().enumerate() {
        for _ in 0..count {
            let id = format!("rep{i:05}");
            for m in Modality::ALL {
                let data = vec![1.0 + rng.random::<f32>(), rng.random::<f32>() - 0.5];
                features.insert(feature_key(&id, m), Arc::new(FeatureMatrix::new(m, 1, 2, data)?));
            }
            records.push(VideoRecord {
                video_id: id.clone(),
                class: ClassId::new(c)?,
                language: LANGS[rng.random_range(0..LANGS.len())].into(),
                audio_clear: rng.random::<f64>() < 0.8,
                human_centric: true,
                duration_s: rng.random_range(20.0..230.0),
                parent_id: String::new(),
                variant_index: 0,
                features: FeatureRefs {
                    video: feature_key(&id, Modality::Video),
                    audio: feature_key(&id, Modality::Audio),
                    text: feature_key(&id, Modality::Text),
                },
            });
            i += 1;
        }
    }
    Manifest::new(records, features)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replica_totals() {
        let c = replica_counts();
        assert_eq!(c.iter().sum::<usize>(), 5168);
        let benign: usize = ClassId::all().filter(|k| !k.info().malicious).map(|k| c[k.index()]).sum();
        assert_eq!(benign, 2472);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec {
            per_class: 5,
            variants: true,
            ..SyntheticSpec::default()
        };
        let a = clustered_manifest(&spec).unwrap();
        let b = clustered_manifest(&spec).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert_eq!(a.len(), 23 * 5 * 4);
        for (k, f) in a.feature_store() {
            assert_eq!(f, &b.feature_store()[k]);
        }
    }
}
