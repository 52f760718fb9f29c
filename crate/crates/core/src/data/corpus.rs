//! Synthetic corpora: transcripts drawn from domain lexicons, rendered into
//! features as noisy per-symbol channel templates.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::domain::DomainSpec;
use super::manifest::{read_features, FeatureSource, Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

const TEMPLATE_SEED: u64 = 0x5eed_0f_7e3a;
/// Silent frames padded before and after each utterance.
pub const EDGE_SILENCE: usize = 2;

/// What one stretch of frames depicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AcousticUnit {
    Symbol(char),
    /// Rendering of a bracketed non-speech token.
    Noise,
}

/// Channel template per acoustic unit, shared by every domain. The last
/// channel is reserved: it is zero in all templates and marks the first
/// frame of each unit.
#[derive(Clone, Debug)]
pub struct AcousticTemplates {
    feature_dim: usize,
    table: HashMap<AcousticUnit, Vec<f64>>,
}

impl AcousticTemplates {
    pub fn new(feature_dim: usize, symbols: &[char]) -> Self {
        let units = symbols
            .iter()
            .map(|&c| AcousticUnit::Symbol(c))
            .chain([AcousticUnit::Noise]);
        let table = units
            .map(|u| {
                let mut rng = rng_for(TEMPLATE_SEED, &format!("{u:?}/{feature_dim}"));
                let mut v: Vec<f64> = (0..feature_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                v[feature_dim - 1] = 0.0;
                (u, v)
            })
            .collect();
        Self { feature_dim, table }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn get(&self, unit: AcousticUnit) -> Option<&[f64]> {
        self.table.get(&unit).map(Vec::as_slice)
    }

    pub fn units(&self) -> impl Iterator<Item = (&AcousticUnit, &Vec<f64>)> {
        self.table.iter()
    }
}

/// Acoustic units spoken in a raw transcript: letters of words (including
/// unfinished ones), a space unit between words, and one noise unit per
/// bracketed token.
pub fn acoustic_units(raw: &str, templates: &AcousticTemplates) -> Vec<AcousticUnit> {
    let mut units = Vec::new();
    let mut in_bracket = false;
    for w in raw.split_whitespace() {
        if in_bracket {
            in_bracket = !w.contains(']');
            continue;
        }
        let mut word = Vec::new();
        if w.starts_with('[') {
            in_bracket = !w.contains(']');
            word.push(AcousticUnit::Noise);
        } else {
            word.extend(
                w.chars()
                    .flat_map(char::to_lowercase)
                    .map(AcousticUnit::Symbol)
                    .filter(|u| templates.get(*u).is_some()),
            );
        }
        if word.is_empty() {
            continue;
        }
        if !units.is_empty() && templates.get(AcousticUnit::Symbol(' ')).is_some() {
            units.push(AcousticUnit::Symbol(' '));
        }
        units.extend(word);
    }
    units
}

/// Renders `raw` under `domain`'s channel, durations and noise.
pub fn render_utterance(
    raw: &str,
    domain: &DomainSpec,
    templates: &AcousticTemplates,
    rng: &mut impl Rng,
) -> Tensor<f32> {
    let f = templates.feature_dim();
    let gain = &domain.channel_gain_profile;
    let mut frames: Vec<f32> = Vec::new();
    let mut push = |values: &[f64], onset: bool, rng: &mut dyn rand::RngCore| {
        for c in 0..f {
            let base = if c == f - 1 && onset { 1.0 } else { values[c] };
            let z: f64 = StandardNormal.sample(rng);
            frames.push((base * gain[c] + domain.noise_std * z) as f32);
        }
    };
    let silence = vec![0.0; f];
    for _ in 0..EDGE_SILENCE {
        push(&silence, false, rng);
    }
    for unit in acoustic_units(raw, templates) {
        let tpl = templates.get(unit).expect("unit has a template");
        let dur = domain.sample_duration(rng);
        for j in 0..dur {
            push(tpl, j == 0, rng);
        }
    }
    for _ in 0..EDGE_SILENCE {
        push(&silence, false, rng);
    }
    let t = frames.len() / f;
    Tensor::new(vec![t, f], frames).expect("frame buffer is whole rows")
}

/// Transcript and feature streams of an utterance are independent, so the
/// features can be re-rendered from the manifest alone.
fn text_rng(seed: u64, id: &str) -> rand_chacha::ChaCha8Rng {
    rng_for(seed, &format!("text/{id}"))
}

fn audio_rng(seed: u64, id: &str) -> rand_chacha::ChaCha8Rng {
    rng_for(seed, &format!("audio/{id}"))
}

/// A manifest plus its features held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: Manifest,
    pub features: BTreeMap<String, Tensor<f32>>,
}

impl Corpus {
    pub fn features_of(&self, id: &str) -> Result<&Tensor<f32>> {
        self.features
            .get(id)
            .ok_or_else(|| Error::contract(format!("no features for utterance {id}")))
    }

    pub fn subset(&self, manifest: Manifest) -> Result<Corpus> {
        let features = manifest
            .entries()
            .iter()
            .map(|e| Ok((e.utterance_id.clone(), self.features_of(&e.utterance_id)?.clone())))
            .collect::<Result<_>>()?;
        Ok(Corpus { manifest, features })
    }

    /// Loads every entry's features: files relative to `base_dir`, synthetic
    /// sources re-rendered with the matching domain from `domains`.
    pub fn load(
        manifest: Manifest,
        base_dir: &Path,
        domains: &[DomainSpec],
        templates: &AcousticTemplates,
    ) -> Result<Corpus> {
        let mut features = BTreeMap::new();
        for e in manifest.entries() {
            let feats = match e.feature_source()? {
                FeatureSource::File(p) => read_features(&base_dir.join(p))?,
                FeatureSource::Synth { seed, domain } => {
                    let spec = domains.iter().find(|d| d.name == domain).ok_or_else(|| {
                        Error::config(format!("unknown domain {domain} in {}", e.utterance_id))
                    })?;
                    let mut rng = audio_rng(seed, &e.utterance_id);
                    render_utterance(&e.raw_transcript, spec, templates, &mut rng)
                }
            };
            features.insert(e.utterance_id.clone(), feats);
        }
        Ok(Corpus { manifest, features })
    }
}

/// Generates `counts[i]` utterances of `domains[i]`. Identical arguments give
/// a bit-identical corpus.
pub fn generate_corpus(
    domains: &[DomainSpec],
    counts: &[usize],
    seed: u64,
    templates: &AcousticTemplates,
) -> Result<Corpus> {
    if domains.is_empty() {
        return Err(Error::contract("corpus generation needs at least one domain"));
    }
    if domains.len() != counts.len() {
        return Err(Error::contract(format!(
            "{} domains but {} counts",
            domains.len(),
            counts.len()
        )));
    }
    let mut entries = Vec::new();
    let mut features = BTreeMap::new();
    for (domain, &count) in domains.iter().zip(counts) {
        domain.validate(templates.feature_dim())?;
        let words = domain.words();
        for i in 0..count {
            let id = format!("{}-{seed}-{i:05}", domain.name);
            let raw = domain.sample_transcript(&words, &mut text_rng(seed, &id));
            let feats = render_utterance(&raw, domain, templates, &mut audio_rng(seed, &id));
            features.insert(id.clone(), feats);
            entries.push(ManifestEntry {
                utterance_id: id,
                source: format!("synth:{seed}:{}", domain.name),
                raw_transcript: raw,
            });
        }
    }
    Ok(Corpus {
        manifest: Manifest::new(entries)?,
        features,
    })
}
